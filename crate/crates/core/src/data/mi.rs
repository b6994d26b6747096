use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{Image, PairedSample};
use crate::error::{MipaError, Result};

pub const MIN_MI_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub mi_nats: f64,
    pub num_pairs: usize,
    /// One of the two summaries was constant; `mi_nats` is then 0.
    pub degenerate: bool,
}

fn patch_means(img: &Image, patch_size: usize) -> Vec<f64> {
    let (h, w, _) = img.dim();
    let mut out = Vec::with_capacity((h / patch_size) * (w / patch_size));
    for gy in 0..h / patch_size {
        for gx in 0..w / patch_size {
            let tile = img.slice(s![
                gy * patch_size..(gy + 1) * patch_size,
                gx * patch_size..(gx + 1) * patch_size,
                ..
            ]);
            out.push(tile.iter().map(|&v| v as f64).sum::<f64>() / tile.len() as f64);
        }
    }
    out
}

/// Co-located mean patch intensities `(f, g)` over all samples.
pub fn patch_intensity_pairs(samples: &[PairedSample], patch_size: usize) -> Vec<(f64, f64)> {
    samples
        .iter()
        .flat_map(|s| {
            patch_means(&s.image_f, patch_size)
                .into_iter()
                .zip(patch_means(&s.image_g, patch_size))
        })
        .collect()
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, total: usize) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in entropy (nats) of an equal-width histogram over the data range.
pub fn histogram_entropy(values: &[f64], bins: usize) -> f64 {
    let (lo, hi) = range(values);
    if hi <= lo {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[bin_index(v, lo, hi, bins)] += 1;
    }
    entropy_of_counts(counts.iter(), values.len())
}

fn range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Histogram estimate of the mutual information between the mean patch
/// intensities of the two modalities, `bins` equal-width bins per axis.
pub fn estimate_pairwise_mi(samples: &[PairedSample], bins: usize, patch_size: usize) -> Result<MiEstimate> {
    if samples.len() < MIN_MI_SAMPLES {
        return Err(MipaError::InvalidValue(format!(
            "need at least {MIN_MI_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if bins < 2 {
        return Err(MipaError::InvalidValue("need at least 2 bins".into()));
    }
    let pairs = patch_intensity_pairs(samples, patch_size);
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (xl, xh) = range(&xs);
    let (yl, yh) = range(&ys);
    if xh <= xl || yh <= yl {
        log::warn!("constant modality summary; mutual information reported as 0");
        return Ok(MiEstimate {
            mi_nats: 0.0,
            num_pairs: pairs.len(),
            degenerate: true,
        });
    }
    let mut joint = Array2::<usize>::zeros((bins, bins));
    for (&x, &y) in xs.iter().zip(&ys) {
        joint[[bin_index(x, xl, xh, bins), bin_index(y, yl, yh, bins)]] += 1;
    }
    let n = pairs.len();
    let hx = entropy_of_counts(joint.sum_axis(ndarray::Axis(1)).iter(), n);
    let hy = entropy_of_counts(joint.sum_axis(ndarray::Axis(0)).iter(), n);
    let hxy = entropy_of_counts(joint.iter(), n);
    Ok(MiEstimate {
        mi_nats: (hx + hy - hxy).max(0.0),
        num_pairs: n,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, SceneSpec};
    use crate::detect::DetectionSet;
    use crate::exec::Execution;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn noise_sample(rng: &mut impl Rng, id: u64) -> PairedSample {
        PairedSample {
            image_f: Array3::from_shape_fn((32, 32, 3), |_| rng.gen()),
            image_g: Array3::from_shape_fn((32, 32, 3), |_| rng.gen()),
            gt: DetectionSet::new(id, vec![]),
            scene_id: id,
            requested_objects: 0,
            object_masks: vec![],
        }
    }

    #[test]
    fn identical_modalities_reach_marginal_entropy() {
        let spec = SceneSpec {
            class_modality_affinity: vec![[1.0, 1.0], [1.0, 1.0]],
            seed: 3,
            ..SceneSpec::default()
        };
        let samples: Vec<PairedSample> = generate_dataset(&spec, 0, 120, Execution::Sequential)
            .into_iter()
            .map(|mut s| {
                s.image_g = s.image_f.clone();
                s
            })
            .collect();
        let mi = estimate_pairwise_mi(&samples, 32, 4).unwrap();
        let xs: Vec<f64> = patch_intensity_pairs(&samples, 4).iter().map(|p| p.0).collect();
        let h = histogram_entropy(&xs, 32);
        assert!((mi.mi_nats - h).abs() < 1e-9, "{} vs {h}", mi.mi_nats);
    }

    #[test]
    fn independent_noise_has_near_zero_mi() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<PairedSample> = (0..500).map(|i| noise_sample(&mut rng, i)).collect();
        let mi = estimate_pairwise_mi(&samples, 32, 4).unwrap();
        assert!(mi.mi_nats < 0.05, "{}", mi.mi_nats);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<PairedSample> = (0..100)
            .map(|i| {
                let mut s = noise_sample(&mut rng, i);
                s.image_g.fill(0.5);
                s
            })
            .collect();
        let mi = estimate_pairwise_mi(&samples, 16, 4).unwrap();
        assert!(mi.degenerate);
        assert_eq!(mi.mi_nats, 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<PairedSample> = (0..99).map(|i| noise_sample(&mut rng, i)).collect();
        assert!(estimate_pairwise_mi(&samples, 32, 4).is_err());
    }
}

#![allow(dead_code)]

use mipa::data::{generate_scene, PairedSample, SceneSpec};
use mipa::detect::{assign_targets, Targets};
use mipa::encoder::EncoderConfig;
use mipa::model::{Detector, ModelConfig};
use mipa::mosaic::{mix, modality_map_from_mask, patchify, sample_mask, PatchGrid};
use mipa::Real;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 16×16 images, 4×4 patch grid, 2×2 detection grid.
pub fn tiny_model_config(with_classifier: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 16,
            num_heads: 2,
            ..EncoderConfig::default()
        },
        image_size: [16, 16],
        num_classes: 2,
        with_classifier,
    }
}

pub fn tiny_spec() -> SceneSpec {
    SceneSpec {
        image_size: [16, 16],
        object_size: [4, 8],
        ..SceneSpec::default()
    }
}

pub struct MosaicInput {
    pub sample: PairedSample,
    pub grid: PatchGrid<f32>,
    pub map: Array2<u8>,
    pub targets: Targets,
}

pub fn mosaic_input(cfg: &ModelConfig, index: u64, rho: f64) -> MosaicInput {
    let sample = generate_scene(&tiny_spec(), index);
    let p = cfg.encoder.patch_size;
    let f = patchify(sample.image_f.view(), p).unwrap();
    let g = patchify(sample.image_g.view(), p).unwrap();
    let mask = sample_mask(f.n(), rho, index).unwrap();
    let (gh, gw) = cfg.patch_grid();
    let (fh, fw) = cfg.final_grid();
    MosaicInput {
        grid: mix(&f, &g, &mask).unwrap(),
        map: modality_map_from_mask(&mask, gh, gw).unwrap(),
        targets: assign_targets(&sample.gt, fh, fw, cfg.num_classes),
        sample,
    }
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `count` distinct flat indices into the parameters whose name starts with
/// `prefix`.
pub fn sample_param_indices<F: Real>(model: &Detector<F>, prefix: &str, count: usize, seed: u64) -> Vec<usize> {
    let mut pool = Vec::new();
    for (name, _) in model.params.iter() {
        if name.starts_with(prefix) {
            let id = model.params.id(name).unwrap();
            pool.extend(model.params.flat_range(id));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, pool.len(), count.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Step for central differences. Smaller steps lose the tiny attention
/// gradients (~1e-8) to round-off in the O(1) loss.
pub const FD_STEP: f64 = 1e-4;

/// Central difference of `f` with respect to flat parameter `i`.
pub fn central_diff(model: &mut Detector<f64>, i: usize, h: f64, f: impl Fn(&Detector<f64>) -> f64) -> f64 {
    let orig = model.params.flat_get(i);
    model.params.flat_set(i, orig + h);
    let up = f(model);
    model.params.flat_set(i, orig - h);
    let down = f(model);
    model.params.flat_set(i, orig);
    (up - down) / (2.0 * h)
}

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::detect::{BoundingBox, DetectionSet};
use crate::error::{MipaError, Result};
use crate::exec::Execution;
use crate::rng::{stream_rng, streams};

/// Scene model: axis-aligned rectangles on a flat background. Modality f
/// (IR) renders grey levels replicated over three channels; modality g
/// (RGB) renders class colours. A class's visibility in a modality scales
/// its contrast against that modality's background, and each modality adds
/// its own i.i.d. Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `[H, W]` in pixels.
    pub image_size: [usize; 2],
    /// Inclusive range of objects per scene.
    pub num_objects: [usize; 2],
    pub object_classes: usize,
    /// Per class `(visibility_f, visibility_g)`.
    pub class_modality_affinity: Vec<[f64; 2]>,
    pub noise_sigma_f: f64,
    pub noise_sigma_g: f64,
    /// Inclusive range of object side lengths in pixels.
    #[serde(default = "default_object_size")]
    pub object_size: [usize; 2],
    pub seed: u64,
}

fn default_object_size() -> [usize; 2] {
    [6, 12]
}

const MAX_PLACEMENT_TRIES: usize = 64;

const BACKGROUND_F: f64 = 0.15;
const BACKGROUND_G: [f64; 3] = [0.45, 0.5, 0.4];
const SIGNATURES_F: [f64; 4] = [0.9, 0.6, 0.75, 0.95];
const SIGNATURES_G: [[f64; 3]; 4] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.1, 0.9, 0.3],
];

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: [32, 32],
            num_objects: [1, 3],
            object_classes: 2,
            class_modality_affinity: vec![[1.0, 0.1], [0.1, 1.0]],
            noise_sigma_f: 0.1,
            noise_sigma_g: 0.1,
            object_size: default_object_size(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let bad = |m: String| Err(MipaError::Config(m));
        let [h, w] = self.image_size;
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return bad(format!("image size {h}x{w} not divisible by patch size {patch_size}"));
        }
        if self.class_modality_affinity.len() != self.object_classes {
            return bad(format!(
                "{} affinity pairs for {} classes",
                self.class_modality_affinity.len(),
                self.object_classes
            ));
        }
        if self.object_classes == 0 || self.object_classes > SIGNATURES_G.len() {
            return bad(format!("object_classes must be in 1..={}", SIGNATURES_G.len()));
        }
        if self
            .class_modality_affinity
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return bad("visibilities must lie in [0, 1]".into());
        }
        if self.noise_sigma_f < 0.0 || self.noise_sigma_g < 0.0 {
            return bad("noise sigmas must be >= 0".into());
        }
        if self.num_objects[0] > self.num_objects[1] {
            return bad("num_objects range is empty".into());
        }
        let [lo, hi] = self.object_size;
        if lo == 0 || lo > hi || hi > h.min(w) {
            return bad(format!("object_size {lo}..={hi} does not fit {h}x{w}"));
        }
        Ok(())
    }

    /// Object colour in each modality, before visibility scaling.
    pub fn signature(&self, class_id: usize) -> (f64, [f64; 3]) {
        (SIGNATURES_F[class_id], SIGNATURES_G[class_id])
    }

    pub fn backgrounds(&self) -> (f64, [f64; 3]) {
        (BACKGROUND_F, BACKGROUND_G)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// IR rendering.
    pub image_f: Image,
    /// RGB rendering.
    pub image_g: Image,
    pub gt: DetectionSet,
    pub scene_id: u64,
    pub requested_objects: usize,
    /// Object footprint per GT box, `true` inside the rectangle.
    pub object_masks: Vec<Array2<bool>>,
}

impl PairedSample {
    pub fn placed_objects(&self) -> usize {
        self.gt.boxes.len()
    }
}

struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

/// Render scene `index`. Fully determined by `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> PairedSample {
    let mut rng = stream_rng(spec.seed, streams::SCENE, index);
    let [h, w] = spec.image_size;
    let requested = rng.gen_range(spec.num_objects[0]..=spec.num_objects[1]);
    let mut rects: Vec<(Rect, usize)> = Vec::new();
    for _ in 0..requested {
        let class_id = rng.gen_range(0..spec.object_classes);
        for _ in 0..MAX_PLACEMENT_TRIES {
            let rh = rng.gen_range(spec.object_size[0]..=spec.object_size[1]);
            let rw = rng.gen_range(spec.object_size[0]..=spec.object_size[1]);
            let r = Rect {
                y: rng.gen_range(0..=h - rh),
                x: rng.gen_range(0..=w - rw),
                h: rh,
                w: rw,
            };
            if rects.iter().all(|(o, _)| !o.overlaps(&r)) {
                rects.push((r, class_id));
                break;
            }
        }
    }
    let (bg_f, bg_g) = spec.backgrounds();
    let mut image_f = Array3::from_elem((h, w, 3), bg_f as f32);
    let mut image_g = Array3::from_shape_fn((h, w, 3), |(_, _, c)| bg_g[c] as f32);
    let mut boxes = Vec::with_capacity(rects.len());
    let mut masks = Vec::with_capacity(rects.len());
    for (r, class_id) in &rects {
        let [vis_f, vis_g] = spec.class_modality_affinity[*class_id];
        let (sig_f, sig_g) = spec.signature(*class_id);
        let val_f = (bg_f + vis_f * (sig_f - bg_f)) as f32;
        image_f
            .slice_mut(s![r.y..r.y + r.h, r.x..r.x + r.w, ..])
            .fill(val_f);
        for c in 0..3 {
            let val_g = (bg_g[c] + vis_g * (sig_g[c] - bg_g[c])) as f32;
            image_g
                .slice_mut(s![r.y..r.y + r.h, r.x..r.x + r.w, c])
                .fill(val_g);
        }
        boxes.push(BoundingBox::gt(
            (r.x as f64 + r.w as f64 / 2.0) / w as f64,
            (r.y as f64 + r.h as f64 / 2.0) / h as f64,
            r.w as f64 / w as f64,
            r.h as f64 / h as f64,
            *class_id,
        ));
        masks.push(Array2::from_shape_fn((h, w), |(y, x)| {
            y >= r.y && y < r.y + r.h && x >= r.x && x < r.x + r.w
        }));
    }
    if spec.noise_sigma_f > 0.0 {
        let n = Normal::new(0.0, spec.noise_sigma_f).expect("sigma >= 0");
        for y in 0..h {
            for x in 0..w {
                // Single-channel sensor: one draw replicated over channels.
                let e = n.sample(&mut rng) as f32;
                for c in 0..3 {
                    image_f[[y, x, c]] += e;
                }
            }
        }
    }
    if spec.noise_sigma_g > 0.0 {
        let n = Normal::new(0.0, spec.noise_sigma_g).expect("sigma >= 0");
        image_g.mapv_inplace(|v| v + n.sample(&mut rng) as f32);
    }
    image_f.mapv_inplace(|v| v.clamp(0.0, 1.0));
    image_g.mapv_inplace(|v| v.clamp(0.0, 1.0));
    PairedSample {
        image_f,
        image_g,
        gt: DetectionSet::new(index, boxes),
        scene_id: index,
        requested_objects: requested,
        object_masks: masks,
    }
}

/// Scenes `start..start + count`, generated in parallel, in index order.
pub fn generate_dataset(spec: &SceneSpec, start: u64, count: usize, exec: Execution) -> Vec<PairedSample> {
    exec.map_range(count, |i| generate_scene(spec, start + i as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            seed: 5,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn zero_objects_is_background_only() {
        let s = SceneSpec {
            num_objects: [0, 0],
            noise_sigma_f: 0.0,
            noise_sigma_g: 0.0,
            ..spec()
        };
        let p = generate_scene(&s, 0);
        assert!(p.gt.boxes.is_empty());
        assert!(p.image_f.iter().all(|&v| v == BACKGROUND_F as f32));
        assert!(p.image_g.indexed_iter().all(|((_, _, c), &v)| v == BACKGROUND_G[c] as f32));
    }

    #[test]
    fn fully_visible_noiseless_object_uses_palette() {
        let s = SceneSpec {
            num_objects: [1, 1],
            object_classes: 1,
            class_modality_affinity: vec![[1.0, 1.0]],
            noise_sigma_f: 0.0,
            noise_sigma_g: 0.0,
            ..spec()
        };
        let p = generate_scene(&s, 3);
        let (sig_f, sig_g) = s.signature(0);
        let mask = &p.object_masks[0];
        for ((y, x), &inside) in mask.indexed_iter() {
            if inside {
                for c in 0..3 {
                    assert_eq!(p.image_f[[y, x, c]], sig_f as f32);
                    assert_eq!(p.image_g[[y, x, c]], sig_g[c] as f32);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let s = spec();
        assert_eq!(generate_scene(&s, 11), generate_scene(&s, 11));
        assert_ne!(generate_scene(&s, 11).image_f, generate_scene(&s, 12).image_f);
        let par = generate_dataset(&s, 10, 8, Execution::Parallel);
        let seq = generate_dataset(&s, 10, 8, Execution::Sequential);
        assert_eq!(par, seq);
        assert_eq!(par[1], generate_scene(&s, 11));
    }

    #[test]
    fn boxes_are_valid_and_disjoint() {
        let s = spec();
        for i in 0..200 {
            let p = generate_scene(&s, i);
            assert!(p.placed_objects() <= p.requested_objects);
            assert!(p.gt.boxes.iter().all(|b| b.is_valid()));
            for a in 0..p.object_masks.len() {
                for b in a + 1..p.object_masks.len() {
                    let both = p.object_masks[a]
                        .iter()
                        .zip(p.object_masks[b].iter())
                        .any(|(&x, &y)| x && y);
                    assert!(!both);
                }
            }
        }
    }

    #[test]
    fn crowded_scenes_place_fewer_objects() {
        let s = SceneSpec {
            image_size: [8, 8],
            num_objects: [20, 20],
            object_size: [6, 6],
            ..spec()
        };
        let p = generate_scene(&s, 0);
        assert_eq!(p.requested_objects, 20);
        assert_eq!(p.placed_objects(), 1);
    }

    #[test]
    fn invisible_modality_has_low_contrast() {
        // Class 0 is IR-visible, class 1 RGB-visible.
        let s = SceneSpec {
            class_modality_affinity: vec![[1.0, 0.1], [0.1, 1.0]],
            ..spec()
        };
        let mut contrast = [[0.0f64; 2]; 2]; // [class][modality]
        let mut counts = [0usize; 2];
        for i in 0..1000 {
            let p = generate_scene(&s, i);
            let bg_mask = Array2::from_shape_fn((32, 32), |(y, x)| !p.object_masks.iter().any(|m| m[[y, x]]));
            for (b, m) in p.gt.boxes.iter().zip(&p.object_masks) {
                for (k, img) in [&p.image_f, &p.image_g].into_iter().enumerate() {
                    let mean_in = mean_over(img, m);
                    let mean_bg = mean_over(img, &bg_mask);
                    // Per-channel absolute contrast, averaged over channels.
                    contrast[b.class_id][k] +=
                        (0..3).map(|c| (mean_in[c] - mean_bg[c]).abs()).sum::<f64>() / 3.0;
                }
                counts[b.class_id] += 1;
            }
        }
        for c in 0..2 {
            let visible = if c == 0 { 0 } else { 1 };
            let ratio = contrast[c][1 - visible] / contrast[c][visible];
            assert!(ratio < 0.15, "class {c}: ratio {ratio}");
            assert!(counts[c] > 100);
        }
    }

    fn mean_over(img: &Image, mask: &Array2<bool>) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for ((y, x, c), &v) in img.indexed_iter() {
            if mask[[y, x]] {
                sum[c] += v as f64;
                n += (c == 0) as usize;
            }
        }
        sum.map(|s| s / n.max(1) as f64)
    }

    #[test]
    fn validation() {
        assert!(spec().validate(4).is_ok());
        assert!(spec().validate(5).is_err());
        let bad = SceneSpec {
            class_modality_affinity: vec![[1.0, 0.1]],
            ..spec()
        };
        assert!(bad.validate(4).is_err());
        let bad = SceneSpec {
            class_modality_affinity: vec![[1.5, 0.1], [0.1, 1.0]],
            ..spec()
        };
        assert!(bad.validate(4).is_err());
    }
}

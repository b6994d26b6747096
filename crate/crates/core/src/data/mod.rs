//! Paired-modality data: synthetic scenes, COCO-layout ingestion, and a
//! mutual-information diagnostic.

mod coco;
mod export;
mod mi;
mod synth;

pub use coco::{load_coco_pairs, CocoPairStream, LoadReport, PairingRule};
pub use export::{write_coco_pairs, IR_DIR, RGB_DIR};
pub use mi::{estimate_pairwise_mi, histogram_entropy, patch_intensity_pairs, MiEstimate};
pub use synth::{generate_dataset, generate_scene, PairedSample, SceneSpec};

use ndarray::Array3;

/// `H×W×C` image with values in `[0, 1]`.
pub type Image = Array3<f32>;

//! Mixed-patch RGB/IR training for a small patch-transformer detector.
//!
//! The pieces, bottom-up:
//! - [`mosaic`]: patchify images and build complementary-mask mosaics.
//! - [`rho`]: per-batch IR ratio policies (fixed, curriculum, variable).
//! - [`nn`] and [`encoder`]: a shared two-stage patch transformer.
//! - [`agnostic`]: gradient reversal, per-patch modality classifier, λ ramp.
//! - [`detect`]: anchor-free per-token detection head and its loss.
//! - [`data`]: synthetic paired scenes, COCO pair ingestion, MI diagnostic.
//! - [`eval`]: IoU, greedy matching, COCO-style AP and per-modality reports.
//! - [`train`]: configs, training regimes, checkpoints, grids and plots.

pub mod agnostic;
pub mod data;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod mosaic;
pub mod nn;
pub mod real;
pub mod rho;
pub mod rng;
pub mod train;

pub use error::{MipaError, Result};
pub use exec::Execution;
pub use real::Real;

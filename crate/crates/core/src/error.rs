use thiserror::Error;

#[derive(Debug, Error)]
pub enum MipaError {
    #[error("image {axis} = {size} is not divisible by patch size {patch_size}")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        patch_size: usize,
    },
    #[error("geometry mismatch: {left} vs {right}")]
    Geometry { left: String, right: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("annotation {path}: {msg}")]
    Annotation { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, MipaError>;

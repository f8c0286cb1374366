use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {loss}")]
    Divergence { step: usize, loss: f64, trace: Vec<f64> },

    #[error("class {class} never reached {needed} pixels within {images} images")]
    StarvedClass { class: usize, needed: usize, images: usize },

    #[error("degenerate center for class {0}: mean direction vanishes")]
    DegenerateCenter(usize),

    #[error("empty mask region")]
    EmptyMask,

    #[error("predictor is not differentiable and cannot drive latent optimization")]
    NonDifferentiable,

    #[error("archive error: {0}")]
    Archive(String),

    #[error("archive format version {found} is not supported (expected {expected})")]
    ArchiveVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("token `{0}` is not in the vocabulary")]
    Vocabulary(String),

    #[error("non-finite latent after sampling step {step}")]
    NumericDivergence { step: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Training { step: usize, loss: f64 },

    #[error("incompatible configuration: {0}")]
    Compatibility(String),

    #[error("mask generation failed: {0}")]
    Generation(String),

    #[error("mask rejected by size filter: {0}")]
    FilterRejected(String),

    #[error("object index {index} out of range (scene has {len} objects)")]
    InvalidIndex { index: usize, len: usize },

    #[error("caption probe protocol violation: {0}")]
    Protocol(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint payload truncated: need {needed} bytes, have {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("cancelled: {0}")]
    Cancelled(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("handle and target coincide; the pair must be deactivated")]
    ZeroDistance,

    #[error("degenerate direction: {0}")]
    DegenerateDirection(&'static str),

    #[error("embedding has zero norm: {0}")]
    ZeroEmbedding(&'static str),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {index} outside schedule of {num_steps} steps")]
    TimestepOutOfRange { index: usize, num_steps: usize },

    #[error("adapter selector {0:?} matched no layers")]
    EmptySelector(String),

    #[error("backend does not support {0}")]
    Unsupported(&'static str),

    #[error("invalid job: {0}")]
    InvalidJob(String),

    #[error("inactive pair {0} passed to motion supervision")]
    InactivePair(usize),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], context: impl Into<String>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.into()))
    }
}

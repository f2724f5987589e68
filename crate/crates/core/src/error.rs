use thiserror::Error;

pub type Result<T> = std::result::Result<T, BladeError>;

#[derive(Debug, Error)]
pub enum BladeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{width}x{height} is not divisible by factor {factor}")]
    NotDivisible { width: usize, height: usize, factor: usize },

    #[error("filter index {index} out of range for a bank of {num_filters} filters")]
    IndexOutOfRange { index: usize, num_filters: usize },

    #[error(
        "correction kernel needs a {needed:?} footprint but the bank footprint is {available:?}; \
         widen the bank footprint first"
    )]
    FootprintOverflow {
        needed: (usize, usize),
        available: (usize, usize),
    },

    #[error("instability at step {step}: {reason}")]
    Instability { step: usize, reason: String },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BladeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        BladeError::InvalidArgument(msg.into())
    }

    /// True for numerical blow-ups (as opposed to usage or IO problems).
    pub fn is_numerical(&self) -> bool {
        matches!(self, BladeError::Instability { .. } | BladeError::Divergence { .. })
    }
}

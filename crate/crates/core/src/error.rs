//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DepthfillError {
    /// Tensor or map shapes do not line up.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: String,
        got: String,
    },

    /// Inputs violate a documented precondition (non-finite values, bad list
    /// lengths, unnormalized affinities, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A loss or metric was requested over a mask with no valid pixels.
    #[error("no valid ground-truth pixels in mask")]
    EmptyMask,

    /// Inverse-depth metrics hit non-positive predictions at valid pixels.
    #[error("inverse metrics undefined: {count} valid pixel(s) with non-positive prediction")]
    NonPositivePrediction { count: usize },

    /// File contents do not match the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint incompatible with the running configuration.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Training produced a non-finite quantity.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DepthfillError>;

impl DepthfillError {
    pub fn dimension(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        DepthfillError::Dimension {
            what: what.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Stable process exit code category for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            DepthfillError::Config(_) => 2,
            DepthfillError::Io(_) | DepthfillError::Format(_) => 3,
            DepthfillError::CheckpointMismatch(_) => 4,
            DepthfillError::Numeric(_) => 5,
            _ => 6,
        }
    }
}

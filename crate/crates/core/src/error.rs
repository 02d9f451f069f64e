use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DormError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("training diverged at step {step}: {what}")]
    TrainingDiverged {
        step: usize,
        what: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DormError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> DormError {
    DormError::InvalidInput(msg.into())
}

/// Bail out with an invalid-input error unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::DormError::InvalidInput(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

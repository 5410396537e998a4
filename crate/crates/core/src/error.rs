use thiserror::Error;

use crate::prior::bridge::BridgeError;

pub type Result<T, E = QcsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QcsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("value {0} is not a codeword of the quantizer")]
    UnknownCodeword(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The truncated-Gaussian mass of an interval underflowed even in scaled form.
    #[error("degenerate interval at index {index}: standardized bounds ({lower}, {upper})")]
    DegenerateInterval { index: usize, lower: f64, upper: f64 },

    #[error("matrix file format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Bridge(#[from] BridgeError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QcsError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        QcsError::InvalidArgument(msg.into())
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(QcsError::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

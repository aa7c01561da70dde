//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor operations, re-parameterization, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or weight shape does not match what an operation requires.
    /// `axis` names the offending dimension.
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A structural configuration is invalid (divisibility, kernel parity,
    /// resolution constraints, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numeric parameter is out of its valid domain (e.g. non-positive
    /// batch-norm sigma).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The requested transformation exists but is deliberately not supported
    /// (e.g. merging a strided conv into an FC kernel).
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// A checkpoint file is malformed. `offset` is the byte position at which
    /// decoding failed.
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// An index into a kernel or feature map is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A numerical equivalence gate failed (e.g. train and deploy outputs
    /// diverged beyond tolerance).
    #[error("verification failure: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}

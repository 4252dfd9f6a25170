//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for a tensor primitive.
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition on an argument was violated (out-of-range index,
    /// empty sequence, invalid weight, ...).
    #[error("{0}")]
    Invalid(String),

    /// A corpus line failed validation.
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    /// Configuration file or manifest problem.
    #[error("config: {0}")]
    Config(String),

    /// Numerical failure (NaN/Inf loss, divergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint file is malformed or inconsistent.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

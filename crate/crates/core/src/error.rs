//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied values failed (shapes, ranges, modes).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Grids that must agree do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A file header or payload is malformed; `field` names the offending entry.
    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    /// Checkpoint/config integrity failure (hash or payload mismatch).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A NaN or divergence was detected during optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Configuration file problems (unknown keys, bad values).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

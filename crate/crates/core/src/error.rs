use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TgmError>;

#[derive(Debug, Error)]
pub enum TgmError {
    /// Shapes, dimensions or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API used out of order or with inconsistent arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// A malformed binary file; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TgmError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TgmError::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        TgmError::Usage(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        TgmError::Format {
            offset,
            message: msg.into(),
        }
    }
}

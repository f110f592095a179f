use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or shape declaration is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was invoked in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A persisted file does not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

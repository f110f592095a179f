use std::io;
use std::path::Path;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Failure categories, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("{0}")]
    Usage(String),
    /// The run stopped on request after this many updates; its directory can be resumed.
    #[error("interrupted after {0} updates")]
    Interrupted(u64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Runtime(_) => 4,
            CliError::Interrupted(_) => 130,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<itergrid::Error> for CliError {
    fn from(e: itergrid::Error) -> Self {
        use itergrid::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Io(err) => CliError::Io(err.to_string()),
            E::Format(m) => CliError::Io(m),
            E::Json(err) => CliError::Io(err.to_string()),
            E::Usage(m) | E::Numerical(m) => CliError::Runtime(m),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

use std::path::PathBuf;

use thiserror::Error;

use crate::linalg::SolveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh: {0}")]
    Mesh(String),

    #[error("field/mesh mismatch: {0}")]
    Mismatch(String),

    #[error("boundary condition: {0}")]
    Boundary(String),

    #[error("config: {0}")]
    Config(String),

    #[error("linear solve failed: {0}")]
    Solve(#[from] SolveError),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Mesh(_) | Error::Boundary(_) | Error::Invalid(_) => 1,
            Error::Solve(_) | Error::Numerical(_) | Error::Mismatch(_) => 2,
            Error::Io { .. } | Error::Format(_) => 3,
        }
    }
}

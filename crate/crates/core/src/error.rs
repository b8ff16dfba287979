use std::path::PathBuf;

use thiserror::Error;

use crate::simulator::Infeasibility;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty trace")]
    EmptyTrace,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("infeasible replica configuration: {0}")]
    Infeasible(Infeasibility),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("database format error: {0}")]
    Format(String),

    #[error("covariance factorization failed after jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("no feasible configuration under constraints")]
    NoFeasibleConfiguration,

    #[error("no record satisfies the requirement; nearest: {nearest}")]
    Unsatisfiable { nearest: String },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

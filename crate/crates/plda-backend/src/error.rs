use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the back-end library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty embedding set")]
    EmptySet,

    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),

    #[error("utterance {0:?} has zero norm after centering")]
    ZeroNorm(String),

    #[error("utterance {0:?} is unlabeled but a fully labeled set is required")]
    Unlabeled(String),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),

    #[error("trial {line}: unknown id {id:?}")]
    UnknownId { id: String, line: usize },

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsnError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: candidate set has {found} candidates, expected {expected}")]
    CandidateCount {
        path: PathBuf,
        line: usize,
        found: usize,
        expected: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("malformed candidate set: {0}")]
    MalformedSet(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),
}

impl CsnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CsnError>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by calibkit operations.
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

    #[error("record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("empty prediction set")]
    EmptySet,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("record `{0}` has no logits")]
    MissingLogits(String),

    #[error("record `{0}` has no features")]
    MissingFeatures(String),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot balance: no {0} predictions in the validation set")]
    EmptyClass(&'static str),

    #[error("template: {0}")]
    Template(String),

    #[error("model file line {line}: {message}")]
    ModelFormat { line: usize, message: String },

    #[error("{0}")]
    Mismatch(String),

    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(id: &str, reason: impl Into<String>) -> Self {
        Error::InvalidRecord {
            id: id.to_string(),
            reason: reason.into(),
        }
    }
}

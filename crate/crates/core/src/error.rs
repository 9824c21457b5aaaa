use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid tag `{tag}` under {schema} schema")]
    InvalidTag { tag: String, schema: String },

    #[error("unknown schema `{0}` (expected `bio` or `io`)")]
    UnknownSchema(String),

    #[error("invalid label set: {0}")]
    LabelSet(String),

    #[error("insufficient data for entity type `{entity_type}`: {message}")]
    InsufficientData { entity_type: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("target puts mass on label {index} where the prediction is zero")]
    SupportViolation { index: usize },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFinite { block: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("head mismatch: {0}")]
    Head(String),

    #[error("vocabulary incompatibility: {0}")]
    Vocabulary(String),

    #[error("sentence {index}: {message}")]
    Length { index: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

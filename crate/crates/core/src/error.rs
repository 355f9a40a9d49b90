use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("record {index}: {message}")]
    MalformedRecord { index: usize, message: String },

    #[error("empty document {0}")]
    EmptyDocument(String),

    #[error("duplicate document id {0}")]
    DuplicateId(String),

    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("sequence of {len} tokens exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("non-finite value during training at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("study: {0}")]
    Study(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

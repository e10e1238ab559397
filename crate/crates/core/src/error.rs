use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: value {value} outside the domain of the operation")]
    Domain { op: &'static str, value: f64 },

    #[error("caption has no valid tokens")]
    EmptyCaption,

    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    #[error("invalid span: {0}")]
    Span(String),

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch size {0} is too small (need at least 2)")]
    BatchSize(usize),

    #[error("corpus has {available} images, need at least {needed}")]
    CorpusSize { available: usize, needed: usize },

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file {}: {reason}", path.display())]
    Corruption { path: PathBuf, reason: String },

    #[error("optimizer state corrupted: {0}")]
    StateCorruption(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

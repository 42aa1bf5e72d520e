use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by model construction, losses, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("teacher queue is empty")]
    QueueEmpty,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("missing loss term: {0}")]
    MissingTerm(&'static str),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset error in {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training error: {0}")]
    Training(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

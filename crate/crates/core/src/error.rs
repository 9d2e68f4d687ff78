use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
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

    #[error("hierarchy: {0}")]
    Hierarchy(String),

    #[error("unknown label {label:?} at level {level}")]
    UnknownLabel { label: String, level: u8 },

    #[error("invalid level mapping {from} -> {to}: only upward (fine to coarse) mapping is supported")]
    DownwardMapping { from: u8, to: u8 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("backbone: {0}")]
    Backbone(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

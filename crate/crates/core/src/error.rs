use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset error in {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { key: key.to_string(), reason: reason.into() }
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("unknown model '{name}'; valid keys: {valid}")]
    UnknownModel { name: String, valid: String },

    #[error("config validation failed:\n{}", messages.join("\n"))]
    InvalidConfig { messages: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing image ids: {}", ids.join(", "))]
    MissingImageIds { ids: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("montage error: {0}")]
    Montage(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error at {path}: {source}")]
    IoAt {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io_at(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

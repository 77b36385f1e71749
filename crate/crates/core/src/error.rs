use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor file or bundle did not follow the expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    /// Data parsed correctly but violates a value constraint (non-finite, out of range).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("config error: {0}")]
    Config(String),

    /// An operation was called outside of its precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

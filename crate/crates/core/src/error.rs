use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("corrupt container at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        last_good: Option<Box<crate::checkpoint::ModelCheckpoint>>,
    },

    #[error("impossible split: {0}")]
    Split(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

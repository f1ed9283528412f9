//! Error type shared by every module.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TincError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TincError {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("batch too small for {term}: need at least 2 rows, got {rows}")]
    BatchTooSmall { term: &'static str, rows: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("AUROC undefined: {0}")]
    AurocUndefined(&'static str),

    #[error("divergence detected at step {step}{}", last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Divergence {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl TincError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TincError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TincError::InvalidArgument(msg.into())
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TincError::Divergence { .. } | TincError::NonFinite(_))
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, SnlError>;

#[derive(Debug, thiserror::Error)]
pub enum SnlError {
    /// Invalid configuration (bad spec, bad flag combination, unresolvable
    /// dataset). CLI exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite loss. CLI exit code 3.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// AUROC is undefined for the given scores/labels.
    #[error("undefined metric for '{scope}': {reason}")]
    UndefinedMetric { scope: String, reason: String },

    #[error("missing ground-truth mask for anomalous test image: {0}")]
    MissingMask(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl SnlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SnlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code contract: 0 success, 2 configuration error, 3 divergence,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SnlError::Config(_) | SnlError::Usage(_) => 2,
            SnlError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

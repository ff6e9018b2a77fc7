//! Error types shared across the toolkit.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, GpslError>;

/// Errors produced by corpus ingestion, training, decoding and model I/O.
#[derive(Debug, thiserror::Error)]
pub enum GpslError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data (CoNLL files, model files, templates).
    #[error("format error: {0}")]
    Format(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    /// A caller violated an argument precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A linear-algebra operation failed (non-SPD matrix, failed line search, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unsupported model format version: {0}")]
    UnsupportedVersion(String),

    /// The requested decoder cannot handle the model's dependency set.
    #[error("unsupported dependency set: {0}")]
    UnsupportedDependency(String),
}

impl GpslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GpslError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical routines (as opposed to usage or
    /// I/O problems). The CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, GpslError::Numerical(_))
    }
}

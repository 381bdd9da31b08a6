use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unreadable or unsupported image content (e.g. multi-channel input).
    #[error("image error: {0}")]
    Image(String),

    /// A configuration or dataset description violates its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Not enough data to satisfy an operation's preconditions.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint/cache digest mismatches and corrupt binary containers.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Malformed text inputs (manifests, config files, import CSVs).
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

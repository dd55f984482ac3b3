//! Error types shared across the toolkit.

use std::path::PathBuf;

/// Errors produced by the simulator and the attack pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix dimensions do not compose; the message names the offending layer
    /// or operand.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value (bad schedule, epochs < 1, r < b, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Filesystem-level failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported capture/matrix file.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset ingestion failure (truncated records, bad layout).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Rank-related failure: requested rank exceeds the matrix, or a matrix
    /// that must be invertible is singular.
    #[error("rank error: {0}")]
    Rank(String),

    /// The capture cannot be attacked (b = 0 or b > min(m, n)).
    #[error("attack precondition violated: {0}")]
    AttackPrecondition(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

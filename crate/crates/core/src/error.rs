use std::path::PathBuf;

/// Errors produced by geometry construction, projection, optimization, and IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented range or relationship.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Buffer or grid dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An index addressed something outside its container.
    #[error("index out of range: {0}")]
    Index(String),

    /// A numeric invariant broke at runtime (NaN loss, non-PD covariance, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The external fixer subprocess misbehaved (bad frame, early exit, timeout).
    #[error("fixer protocol error: {0}")]
    Fixer(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// A file did not match its expected binary or text schema.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

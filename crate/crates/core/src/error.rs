use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure class, used by front ends to pick an exit code or an
/// HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// The caller asked for something that cannot be done as stated.
    Usage,
    /// Input data is missing, malformed or inconsistent.
    Data,
    /// Anything else.
    Internal,
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("ingestion failed at {entry}: {reason}")]
    Ingest { entry: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("manifest line {line}: {reason}")]
    ManifestLine { line: usize, reason: String },

    #[error("preprocessing: {0}")]
    Preprocess(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("record {record}: {reason}")]
    Label { record: String, reason: String },

    #[error("model file is corrupt: {0}")]
    Corrupt(String),

    #[error("unsupported model schema: {0}")]
    SchemaVersion(String),

    #[error("{0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Usage(_) | Error::Shape { .. } => ErrorKind::Usage,
            Error::Internal(_) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn ingest(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Ingest {
            entry: entry.into(),
            reason: reason.into(),
        }
    }
}

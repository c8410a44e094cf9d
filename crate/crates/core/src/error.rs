use std::path::PathBuf;

/// Broad failure category, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image `{id}`: {message}")]
    Decode { id: String, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value ({context}) for image(s) {ids:?}")]
    NonFinite { context: String, ids: Vec<String> },
    #[error("clustering failed: {0}")]
    Clustering(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::NonFinite { .. } | Error::Clustering(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the error with the id of the image being processed.
    pub fn with_image(self, id: &str) -> Self {
        match self {
            Error::Clustering(msg) => Error::Clustering(format!("image `{id}`: {msg}")),
            Error::Shape(msg) => Error::Shape(format!("image `{id}`: {msg}")),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

/// Errors produced anywhere in the training engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid IDX format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated IDX file {path}: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("class {class} has {available} samples, {requested} requested")]
    Capacity {
        class: u8,
        available: usize,
        requested: usize,
    },

    #[error("non-finite values in {layer}")]
    Numeric { layer: String },

    #[error("degenerate model metric running mean (zero) while selecting for layer {layer}")]
    DegenerateMetric { layer: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error on {path}: {reason}")]
    Serde { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn serde(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Serde {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

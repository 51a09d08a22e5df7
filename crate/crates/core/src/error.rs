//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by policy evaluation, loss computation, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An index fell outside the dimension it addresses.
    #[error("{dimension} index {index} out of range (size {size})")]
    Index {
        dimension: &'static str,
        index: usize,
        size: usize,
    },

    /// Inconsistent tables, missing augmentation mapping, invalid config values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numeric input is outside the function's domain (NaN, infinity).
    #[error("domain error: {0}")]
    Domain(String),

    /// A dataset or config line could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A parsed record breaks a dataset invariant.
    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at step {step} (tuples {tuples:?}): {message}")]
    Divergence {
        step: usize,
        tuples: Vec<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

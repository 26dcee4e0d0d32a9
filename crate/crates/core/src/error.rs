use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or incomplete configuration (missing directories, bad keys, impossible sizes).
    #[error("configuration error: {0}")]
    Config(String),
    /// A function argument violated its documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// An image in the dataset has no matching mask (or vice versa).
    #[error("pairing error: no mask found for image id `{id}`")]
    Pairing { id: String },
    #[error("I/O error at {path}: {message}")]
    Io { path: PathBuf, message: String },
    /// Data values outside their declared domain.
    #[error("validation error: {0}")]
    Validation(String),
    /// A loss or activation became non-finite.
    #[error("numeric error in {term}: {message}")]
    Numeric { term: String, message: String },
    /// An operation produced (or was handed) an empty mask.
    #[error("degenerate output: {0}")]
    Degenerate(String),
    /// Malformed binary or text artifact.
    #[error("format error: {0}")]
    Format(String),
    /// Statistical estimation impossible for the given sample.
    #[error("estimation error: {0}")]
    Estimation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Argument(_) | Error::Validation(_) | Error::Pairing { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

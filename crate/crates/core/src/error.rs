use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{path}: {message} (at {offset})")]
    Ingestion {
        path: PathBuf,
        offset: String,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite {term} at step {step}: {value}")]
    NonFinite {
        term: &'static str,
        step: usize,
        value: f64,
    },

    #[error("degenerate count range: every training count equals {0}")]
    DegenerateRange(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

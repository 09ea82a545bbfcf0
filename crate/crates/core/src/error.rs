use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("arity error: expected {expected} {what}, got {actual}")]
    Arity {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {message} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("training diverged at step {step} (last finite loss {last_finite_loss:?} at step {last_finite_step:?})")]
    Divergence {
        step: usize,
        last_finite_step: Option<usize>,
        last_finite_loss: Option<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

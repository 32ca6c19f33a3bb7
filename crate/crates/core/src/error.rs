use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value at index {index}: {what}")]
    NonFinitePosition { index: usize, what: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("raster format: {0}")]
    Raster(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration mismatch in field `{field}`: checkpoint has {stored}, expected {expected}")]
    ConfigMismatch {
        field: String,
        stored: String,
        expected: String,
    },

    #[error("unknown synthetic scenario `{0}`")]
    UnknownScenario(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DralError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DralError {
    #[error("shape mismatch at layer {layer}: expected {expected} columns, got {got}")]
    LayerShape { layer: usize, expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("oracle failure: {0}")]
    Oracle(String),

    // the cause is part of the message, so it is not also exposed as a source
    #[error("I/O error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl DralError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DralError::Io { path: path.into(), cause: source }
    }
}

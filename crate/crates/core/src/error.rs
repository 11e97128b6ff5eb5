use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter length {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input has {got} features, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("empty sample batch")]
    EmptyBatch,
    #[error("label {label} outside [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },
    #[error("target/prediction mismatch: {0}")]
    TargetMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at {stage} step {step}")]
    Diverged { stage: String, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type LabResult<T> = Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> LabResult<T> {
    Err(LabError::Invalid(msg.into()))
}

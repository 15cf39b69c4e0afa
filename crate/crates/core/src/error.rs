use std::io;

use crate::inference::DenoiseTrace;

/// Everything that can go wrong inside the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    /// Malformed, truncated or mismatched dataset / checkpoint file.
    #[error("load error: {0}")]
    Load(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("training diverged in stage {stage} at epoch {epoch}")]
    TrainingFailure { stage: &'static str, epoch: usize },

    #[error("inference failed after {} iterations: {message}", trace.iterations.len())]
    InferenceFailure {
        message: String,
        trace: Box<DenoiseTrace>,
    },

    #[error("internal consistency error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

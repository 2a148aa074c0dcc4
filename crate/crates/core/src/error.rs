use thiserror::Error;

/// Errors raised anywhere in the aggregation pipeline.
#[derive(Debug, Error)]
pub enum VatError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("ground-truth mask has no boundary pixels")]
    EmptyBoundary,
    #[error("container format error: {0}")]
    Format(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VatError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(VatError::Shape(msg.into()))
}

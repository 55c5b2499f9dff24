use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A parameterization collapsed (zero-length vector, parallel columns, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// A map or masked loss has no foreground pixels.
    #[error("empty mask: {0}")]
    EmptyMask(String),
    /// A pose solver could not produce an estimate.
    #[error("solver failure: {0}")]
    SolverFailure(String),
    /// Tensor shapes are inconsistent for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },
    /// A configuration value is out of its valid range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn degenerate(msg: impl Into<String>) -> Error {
    Error::DegenerateInput(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

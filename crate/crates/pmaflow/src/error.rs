use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value while evaluating layer {layer}")]
    NonFinite { layer: usize },
    #[error("convexity lost: psi''({y}) = {d2}")]
    Convexity { y: f64, d2: f64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize },
    #[error("step size too large: next s = {0}; use the adaptive rule")]
    StepSize(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

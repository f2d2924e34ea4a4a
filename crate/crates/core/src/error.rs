use thiserror::Error;

/// Errors raised by the flow-matching engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain where an expression is defined.
    #[error("domain error: {0}")]
    Domain(String),
    /// Input data violated a structural or normalization contract.
    #[error("validation error: {0}")]
    Validation(String),
    /// Inconsistent configuration (vocabulary, shapes, source kind).
    #[error("configuration error: {0}")]
    Config(String),
    /// An observation has zero likelihood under every target in the support.
    #[error("evidence error: {0}")]
    Evidence(String),
    /// A jump was drawn but the off-diagonal mass is zero or not finite.
    #[error("numerical guard: {0}")]
    NumericalGuard(String),
    /// The Euler integrator produced negative transition mass.
    #[error("step-size error: {0}")]
    StepSize(String),
    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

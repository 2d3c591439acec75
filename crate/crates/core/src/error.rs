use thiserror::Error;

/// Errors raised by the engine and its building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite state at t = {t}")]
    NumericalBlowup { t: f64 },
    #[error("policy returned a non-finite input at t = {t}")]
    PolicyFailure { t: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("planning failed: {0}")]
    PlanFailure(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// All weights vanished, so the estimand has no target population.
    #[error("empty target population: every weight is zero")]
    EmptyTarget,

    #[error("pool exhausted: no available candidates")]
    PoolExhausted,

    #[error("invalid state: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for AceError {
    fn from(e: std::io::Error) -> Self {
        AceError::Io(e.to_string())
    }
}

impl From<csv::Error> for AceError {
    fn from(e: csv::Error) -> Self {
        AceError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AceError>;

use thiserror::Error;

/// Errors surfaced by the library. Validation problems and refusals are
/// `InvalidInput`; iterative solvers that run out of iterations report
/// `NonConvergence` so callers can distinguish bad inputs from hard markets.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("oracle refused: {active} active bidders exceed the enumeration cap of {cap}")]
    OracleCap { active: usize, cap: usize },

    #[error("{context}: no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

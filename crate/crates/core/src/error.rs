use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-monotone event times in sequence {sequence}")]
    NonMonotone { sequence: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("degenerate dataset: {0}")]
    Degenerate(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric degeneracy: {0}")]
    Numeric(String),

    #[error("mark {0} has zero probability mass")]
    ZeroMassMark(usize),

    #[error("sampler bracket not found within {doublings} doublings (undecayed tail mass)")]
    TailMass { doublings: usize },

    #[error("bisection exceeded {iters} iterations, residual {residual}")]
    Tolerance { iters: usize, residual: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

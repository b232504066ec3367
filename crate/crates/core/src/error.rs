//! Error type shared across the toolkit.
//!
//! Variants are grouped by the process exit code they map to: configuration
//! problems exit 2, data problems exit 3, engine/numerical problems exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // --- configuration (exit 2) ---
    #[error("config error: {0}")]
    Config(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("validation error: {0}")]
    Validation(String),

    // --- data (exit 3) ---
    #[error("data error: {0}")]
    Data(String),
    #[error("tokenization error: no vocabulary entry matches {0:?}")]
    Tokenization(String),
    #[error("insufficient trials: {0}")]
    InsufficientTrials(String),
    #[error("trial alignment error: {0}")]
    Alignment(String),

    // --- engine / numerics (exit 4) ---
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate attention row: {0}")]
    DegenerateRow(String),
    #[error("missing capture: {0}")]
    MissingCapture(String),
    #[error("answer-position coverage: {0}")]
    Coverage(String),
    #[error("degenerate steering direction: {0}")]
    DegenerateDirection(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("singular system: {0}")]
    Singularity(String),
    #[error("no convergence: gradient inf-norm {grad_norm:.3e} after {iters} iterations")]
    Convergence { grad_norm: f64, iters: usize },
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("undefined denominator: {0}")]
    UndefinedDenominator(String),
    #[error("oracle gap: no closed-form prediction for {0}")]
    OracleGap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 0 success, 2 config, 3 data, 4 engine.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Template(_) | Error::Validation(_) => 2,
            Error::Data(_)
            | Error::Tokenization(_)
            | Error::InsufficientTrials(_)
            | Error::Alignment(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            _ => 4,
        }
    }
}

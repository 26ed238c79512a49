use thiserror::Error;

/// Errors raised by the solver, the estimators and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("mixture weights must be positive and sum to 1 (sum = {0})")]
    WeightsNotNormalized(f64),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty point set")]
    EmptyPoints,

    #[error("histogram grid too large: {0} bins (limit 10^7)")]
    GridTooLarge(u64),

    #[error("regularization weight must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("non-finite particle state at step {step}, {family} index {index}")]
    NonFinite {
        step: usize,
        family: &'static str,
        index: usize,
    },

    #[error("point counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),

    #[error("exact solver budget exceeded: n = {0} > {1}")]
    OverBudget(usize, usize),

    #[error("{0}")]
    Config(String),

    #[error("csv parse error at line {line}: {reason}")]
    Csv { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),
    #[error("k={k} out of range for length {len}")]
    InvalidK { k: usize, len: usize },
    #[error("pooling kernel must be odd and >= 1, got {0}")]
    InvalidKernel(usize),
    #[error("index {index} invalid (bound {bound})")]
    InvalidIndex { index: usize, bound: usize },
    #[error("observation window {window} exceeds sequence length {seq_len}")]
    InvalidWindow { window: usize, seq_len: usize },
    #[error("budget {budget} exceeds sequence length {seq_len}")]
    BudgetExceedsSequence { budget: usize, seq_len: usize },
    #[error("no active tokens in cache")]
    EmptyCache,
    #[error("empty token selection")]
    EmptySelection,
    #[error("compression ratio must be >= 1, got {0}")]
    InvalidRatio(f64),
    #[error("token budget must be >= 2, got {0}")]
    BudgetTooSmall(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite attention output at step {step}")]
    NumericalFailure { step: usize },
    #[error("trace format: {0}")]
    TraceFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("matrix is not symmetric positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("every category has zero probability")]
    DegenerateCategorical,
    #[error("diagnostic input: {0}")]
    Diagnostic(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate map geometry: {0}")]
    DegenerateGeometry(String),

    #[error("singular or ill-conditioned matrix: {0}")]
    IllConditioned(String),

    #[error("non-finite energy encountered: {0}")]
    NonFiniteEnergy(String),

    #[error("rank-deficient basis on data: {0}")]
    RankDeficientBasis(String),

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("empty or invalid binning range: {0}")]
    EmptyBinning(String),

    #[error("optimizer diverged: {0}")]
    OptimizerDiverged(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

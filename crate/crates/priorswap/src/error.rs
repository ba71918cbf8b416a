//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no conjugate posterior: {0}")]
    NotConjugate(String),

    #[error("all importance weights are zero or underflowed")]
    DegenerateWeights,

    #[error("support mismatch at theta = {theta}: false prior density is zero where the target prior density is positive")]
    SupportMismatch { theta: String },

    #[error("target log-density is not finite at the chain start")]
    InvalidStart,

    #[error("target provides no gradient; gradient-based sampling is unavailable")]
    GradientUnavailable,

    #[error("integration bounds too tight: boundary mass fraction {fraction:.3e} exceeds {limit:.1e}")]
    BoundsTooTight { fraction: f64, limit: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

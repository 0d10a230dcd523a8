//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, inference, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A wind vector with zero (or non-finite) magnitude cannot define a direction.
    #[error("zero-magnitude wind vector{}", fmt_ctx(.context))]
    ZeroWind { context: Option<String> },

    /// Two sites that must be distinct coincide.
    #[error("coincident sites{}", fmt_ctx(.context))]
    CoincidentSites { context: Option<String> },

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Cholesky factorization failed even after the jitter ladder was exhausted.
    #[error("covariance factorization failed after jitter up to {max_jitter:e}: {context}")]
    Factorization { context: String, max_jitter: f64 },

    /// A function argument is outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed dataset or tabular file. Messages carry 1-based line numbers.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A numerical routine produced a non-finite or otherwise unusable value.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_ctx(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

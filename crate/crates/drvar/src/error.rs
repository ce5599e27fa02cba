//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural requirement (non-binary treatment,
    /// non-finite values, too few rows, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// A design spec references unknown covariates, duplicates terms, or is
    /// otherwise inconsistent with the dataset.
    #[error("invalid design spec: {0}")]
    Spec(String),

    /// Vector/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A linear system could not be solved (rank-deficient design, singular
    /// bread matrix, collinear nuisance scores).
    #[error("singular system: {0}")]
    Singular(String),

    /// Iterative fitting did not reach the convergence tolerance.
    #[error("did not converge: {0}")]
    Convergence(String),

    /// A fitted propensity hit the boundary of (0, 1).
    #[error("positivity violation: {0}")]
    Positivity(String),

    /// Degenerate resampling or split (all-treated half, too many skipped
    /// bootstrap replicates, ...).
    #[error("degenerate resampling: {0}")]
    Degenerate(String),

    /// Too many Monte Carlo replications failed.
    #[error("experiment failure: {0}")]
    Experiment(String),

    /// Invalid user-supplied parameter or configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

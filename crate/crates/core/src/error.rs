//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point (or a path sample) violates the manifold constraint.
    #[error("point is off the manifold: residual {residual:.3e} exceeds {tolerance:.3e}")]
    OffManifold { residual: f64, tolerance: f64 },

    /// Invalid argument values (non-positive radii, unsorted eigenvalues, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The operation is not defined for the given manifold.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// The fixed-step integrator detected first-integral drift beyond the
    /// stability threshold.
    #[error(
        "integration unstable: first-integral drift {drift:.3e}; retry with at least {suggested_steps} steps"
    )]
    IntegrationUnstable { drift: f64, suggested_steps: usize },

    /// NaN or infinity appeared where a finite value was required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Malformed configuration or data file.
    #[error("configuration error: {0}")]
    Config(String),
}

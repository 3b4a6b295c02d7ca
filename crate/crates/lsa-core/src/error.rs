//! Error type shared by every module in this crate.

use alloc::string::String;

/// Failure classes for chain construction, problem generation, runs, and
/// inference.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input failed a structural or domain check (dimensions, signs,
    /// stochasticity, ranges).
    #[error("validation error: {0}")]
    Validation(String),

    /// A computation could not reach the required accuracy or a linear
    /// system turned out singular.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A batching plan is inconsistent with the run it is applied to.
    #[error("plan error: {0}")]
    Plan(String),

    /// An internal consistency check failed; this indicates a bug rather
    /// than bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = core::result::Result<T, Error>;

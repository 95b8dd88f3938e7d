//! Crate-wide error type.
//!
//! Three broad classes matter to callers: argument errors (caller bug,
//! caught before any numerics run), numeric errors (LAPACK non-convergence,
//! non-finite data), and estimation errors (the data admits no usable
//! answer: degenerate subspace, unreliable generators, pairing exhaustion).
//! The Monte Carlo harness treats estimation errors as failed trials;
//! argument errors always propagate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed dimensions or parameters that violate a precondition.
    #[error("argument error: {0}")]
    Argument(String),

    /// A numeric kernel failed (non-convergence, non-finite input).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The observation carries no usable signal subspace.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Estimated phase generators fell outside the trustworthy region.
    /// Carries the offending generator indices.
    #[error("unreliable generators at indices {indices:?}: {detail}")]
    UnreliableGenerators { indices: Vec<usize>, detail: String },

    /// Pair matching ran out of candidates before all sources were paired.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// Configuration file / CLI input could not be used.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that represent a failed estimation on valid input,
    /// i.e. the classes a Monte Carlo trial may survive by being recorded
    /// as failed rather than aborting the sweep.
    pub fn is_trial_failure(&self) -> bool {
        matches!(
            self,
            Error::DegenerateInput(_)
                | Error::UnreliableGenerators { .. }
                | Error::Pairing(_)
                | Error::Numeric(_)
        )
    }
}

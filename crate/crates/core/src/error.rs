use thiserror::Error;

use crate::mesh::Point;

/// Per-iteration record of a Newton solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NewtonHistory {
    /// ℓ₂ residual norms, starting with the initial guess.
    pub residual_norms: Vec<f64>,
    /// Accepted line-search step lengths, one per completed iteration.
    pub step_lengths: Vec<f64>,
}

impl NewtonHistory {
    pub fn iterations(&self) -> usize {
        self.step_lengths.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_norms.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value {value} at ({}, {})", .location[0], .location[1])]
    NonFinite { location: Point, value: f64 },

    #[error("non-finite residual entry {index}")]
    NonFiniteResidual { index: usize },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("Newton did not converge after {} iterations (residual {:.3e}): {reason}", .history.iterations(), .history.final_residual())]
    NonConvergence {
        reason: String,
        history: NewtonHistory,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps the error with a location such as a continuation stage or a time step.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_nonconvergence(&self) -> bool {
        matches!(self.root(), Error::NonConvergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

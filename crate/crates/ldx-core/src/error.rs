//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdxError {
    /// Input violates a documented precondition or structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An iterative routine hit its iteration cap before reaching tolerance.
    #[error("convergence error: {0}")]
    Convergence(String),

    /// Two actions tie for the optimum at some state within the tie tolerance.
    #[error("non-unique optimal policy: actions {a} and {b} tie at state {state} within {tol:e}")]
    NonUniqueOptimum {
        state: usize,
        a: usize,
        b: usize,
        tol: f64,
    },

    /// The epsilon-restricted flow polytope is empty even after shrinking epsilon.
    #[error("infeasible flow polytope: {0}")]
    Infeasible(String),

    /// A denominator coordinate of the surrogate objective is not positive.
    #[error("positivity error: {0}")]
    Positivity(String),

    /// An allocation has a state with zero row mass and cannot define a policy.
    #[error("degenerate allocation: {0}")]
    DegenerateAllocation(String),

    /// A linear solve or projection failed numerically.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Trajectory sampling was requested on a non-ergodic environment.
    #[error("mode error: {0}")]
    Mode(String),

    /// A rate-function argument sits outside the support of the reference law.
    #[error("infinite rate: {0}")]
    InfiniteRate(String),

    /// A linear-MDP triple does not induce a valid tabular model.
    #[error("representation error: {0}")]
    Representation(String),

    /// A design matrix is singular beyond what the ridge can absorb.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl LdxError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LdxError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LdxError>;

//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the Lie kernels, problem layer, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// `vee` was handed a matrix that is not skew-symmetric.
    #[error("matrix is not skew-symmetric (deviation {deviation:.3e})")]
    InvalidAlgebraMatrix { deviation: f64 },

    /// A matrix that should be a rotation is too far from the group.
    #[error("matrix is not orthonormal with unit determinant (deviation {deviation:.3e})")]
    InvalidGroupMatrix { deviation: f64 },

    /// The rotation angle left the principal branch of the logarithm.
    #[error("rotation angle {angle:.6} is outside the principal branch of log")]
    LogBranchCut { angle: f64 },

    /// A boundary-specific operation was called with the wrong boundary variant.
    #[error("operation requires boundary variant {expected}, problem has {found}")]
    BoundaryMismatch {
        expected: &'static str,
        found: &'static str,
    },

    /// The final-manifold submersion Jacobian lost rank.
    #[error("submersion Jacobian is rank deficient (smallest singular value {sigma_min:.3e})")]
    SubmersionRankError { sigma_min: f64 },

    /// The Hamiltonian is not concave in the control at the queried point.
    #[error("Hamiltonian is not concave in u (curvature {curvature:.3e}); argmax unavailable")]
    NonConcaveHamiltonian { curvature: f64 },

    /// A trajectory passed for costing does not satisfy the state recursion.
    #[error("trajectory inconsistent with controls at step {step} (defect {defect:.3e})")]
    InconsistentTrajectory { step: usize, defect: f64 },

    /// A problem or maneuver specification violates its invariants.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// An iterative solver ran out of iterations.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e}){}",
            hint.as_deref().map(|h| format!("; {h}")).unwrap_or_default())]
    NoConvergence {
        iterations: usize,
        residual: f64,
        hint: Option<String>,
    },

    /// A Newton step could not be computed.
    #[error("singular Jacobian: {0}")]
    SingularJacobian(&'static str),

    /// A user map or intermediate value produced a NaN or infinity.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

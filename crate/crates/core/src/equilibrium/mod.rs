//! Implicit multi-scale equilibrium fusion.
//!
//! * [`fusion`]: the fusion operator `Phi` (adaptive level weights followed by
//!   a depthwise refinement).
//! * [`broyden`]: limited-memory Broyden solver for `F = Phi(F)`, plus plain
//!   Picard iteration.
//! * [`implicit`]: gradients through a fixed point without unrolling the solver.
//! * [`oracle`]: dense reference computations for small states, used by tests.

pub mod broyden;
pub mod fusion;
pub mod implicit;
pub mod oracle;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use broyden::{broyden_solve, picard_solve};
pub use fusion::{FusionOperator, FusionParams};
pub use implicit::{implicit_backward, ImplicitGrads};

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SolverConfig {
    /// Scale of the initial inverse-Jacobian estimate `-alpha * I`; the first
    /// step is therefore `F_1 = F_0 + alpha * (Phi(F_0) - F_0)`.
    pub alpha: f64,
    /// Stop once the l2 residual `||Phi(F) - F||` is at or below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of rank-one corrections kept.
    pub memory: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tol: 1e-6,
            max_iter: 50,
            memory: 20,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "solver alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "solver tol must be > 0, got {}",
                self.tol
            )));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidArgument("solver max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumResult {
    /// Best iterate found (lowest residual).
    pub f_star: Tensor4,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual after every evaluation, starting with the initial guess.
    pub residual_trace: Vec<f64>,
}

/// JSON-facing summary of a solve.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    pub residual_trace: Vec<f64>,
}

impl EquilibriumResult {
    pub fn diagnostics(&self) -> SolverDiagnostics {
        SolverDiagnostics {
            iterations: self.iterations,
            residual_norm: self.residual_norm,
            converged: self.converged,
            residual_trace: self.residual_trace.clone(),
        }
    }
}

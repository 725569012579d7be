//! Backward pass through a fixed point.
//!
//! At `F* = Phi(F*; x)` the cotangent of the inputs is `u^T dPhi/dx`, where `u`
//! solves `u = grad_out + J_Phi(F*)^T u`. The solve reuses one recording of
//! `Phi` at `F*` for every vector-Jacobian product.

use super::SolverConfig;
use crate::autodiff::{FixedPointOperator, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Consecutive growing increments tolerated before the iteration is declared divergent.
const DIVERGENCE_WINDOW: usize = 10;

#[derive(Clone, Debug)]
pub struct ImplicitGrads {
    /// Cotangent of every operator input, in input order.
    pub input_grads: Vec<Tensor4>,
    /// The solution `u` of the adjoint fixed point.
    pub adjoint: Tensor4,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the adjoint equation by fixed-point iteration and pulls `u` back to
/// the operator inputs.
///
/// The iteration stops once successive iterates differ by less than `cfg.tol`
/// in l2 or after `cfg.max_iter` steps. If the increment grows for ten steps in
/// a row the operator is not contractive at `f_star` and an error is returned.
pub fn implicit_backward(
    op: &dyn FixedPointOperator,
    inputs: &[Tensor4],
    f_star: &Tensor4,
    grad_out: &Tensor4,
    cfg: &SolverConfig,
) -> Result<ImplicitGrads> {
    if grad_out.shape() != f_star.shape() {
        return Err(Error::Shape(format!(
            "grad_out {} does not match state {}",
            grad_out.shape(),
            f_star.shape()
        )));
    }
    let mut tape = Tape::new();
    let state = tape.constant(f_star.clone());
    let ins: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op.record(&mut tape, state, &ins)?;

    let mut u = grad_out.clone();
    let mut last_step = f64::INFINITY;
    let mut growing = 0;
    let mut iterations = 0;
    let mut converged = false;
    for k in 1..=cfg.max_iter {
        let jtu = tape.grads(&[(out, u.clone())])?.get_or_zeros(&tape, state);
        let next = grad_out.axpy(1.0, &jtu)?;
        if !next.is_finite() {
            return Err(Error::NonFinite("implicit backward".into()));
        }
        let step = next.sub(&u)?.norm();
        u = next;
        iterations = k;
        if step < cfg.tol {
            converged = true;
            break;
        }
        if step > last_step {
            growing += 1;
            if growing >= DIVERGENCE_WINDOW {
                return Err(Error::ContractionViolation {
                    steps: growing,
                    norm: u.norm(),
                });
            }
        } else {
            growing = 0;
        }
        last_step = step;
    }

    let grads = tape.grads(&[(out, u.clone())])?;
    Ok(ImplicitGrads {
        input_grads: ins.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect(),
        adjoint: u,
        iterations,
        converged,
    })
}

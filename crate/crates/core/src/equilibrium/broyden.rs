//! Fixed-point solvers for `F = Phi(F)`.

use std::collections::VecDeque;

use super::{EquilibriumResult, SolverConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
fn residual(phi_f: &Tensor4, f: &Tensor4) -> Vec<f64> {
    phi_f.data().iter().zip(f.data()).map(|(p, x)| p - x).collect()
}

/// Inverse-Jacobian estimate `B = -alpha*I + sum_i u_i v_i^T` for `g(F) = Phi(F) - F`.
struct InverseJacobian {
    alpha: f64,
    memory: usize,
    terms: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl InverseJacobian {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -self.alpha * v).collect();
        for (u, v) in &self.terms {
            let s = dot(v, x);
            out.iter_mut().zip(u).for_each(|(o, ui)| *o += s * ui);
        }
        out
    }

    /// Type-II ("bad") Broyden secant update: the least-change correction of
    /// `B` in Frobenius norm such that `B * dg = df`.
    fn update(&mut self, df: &[f64], dg: &[f64]) {
        let denom = dot(dg, dg);
        if !denom.is_finite() || denom <= f64::MIN_POSITIVE {
            return;
        }
        let b_dg = self.apply(dg);
        let u: Vec<f64> = df.iter().zip(&b_dg).map(|(a, b)| (a - b) / denom).collect();
        self.terms.push_back((u, dg.to_vec()));
        while self.terms.len() > self.memory {
            self.terms.pop_front();
        }
    }
}

/// Limited-memory Broyden iteration `F_{k+1} = F_k - B_k g(F_k)`.
///
/// `B_0 = -alpha * I`, so the first step is a damped Picard step of size
/// `alpha`; later steps follow the secant model. Returns the iterate with the
/// lowest residual. Running out of iterations is reported through
/// `converged = false`; a non-finite iterate is an error.
pub fn broyden_solve(
    mut phi: impl FnMut(&Tensor4) -> Result<Tensor4>,
    f0: &Tensor4,
    cfg: &SolverConfig,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    f0.ensure_finite("broyden_solve initial guess")?;
    let shape = f0.shape();
    let eval = |phi: &mut dyn FnMut(&Tensor4) -> Result<Tensor4>, f: &Tensor4, k: usize| {
        let out = phi(f)?;
        if out.shape() != shape {
            return Err(Error::Shape(format!(
                "phi changed the state shape from {shape} to {}",
                out.shape()
            )));
        }
        if !out.is_finite() {
            return Err(Error::SolverNonFinite(k));
        }
        Ok(residual(&out, f))
    };

    let mut f = f0.clone();
    let mut g = eval(&mut phi, &f, 0)?;
    let r = norm(&g);
    let mut trace = vec![r];
    let (mut best, mut best_r) = (f.clone(), r);
    if r <= cfg.tol {
        return Ok(EquilibriumResult {
            f_star: f,
            residual_norm: r,
            iterations: 0,
            converged: true,
            residual_trace: trace,
        });
    }

    let mut inv = InverseJacobian {
        alpha: cfg.alpha,
        memory: cfg.memory,
        terms: VecDeque::new(),
    };
    for k in 1..=cfg.max_iter {
        let step: Vec<f64> = inv.apply(&g).into_iter().map(|s| -s).collect();
        let mut next = f.clone();
        next.data_mut().iter_mut().zip(&step).for_each(|(x, s)| *x += s);
        if !next.is_finite() {
            return Err(Error::SolverNonFinite(k));
        }
        let g_next = eval(&mut phi, &next, k)?;
        let r_next = norm(&g_next);
        trace.push(r_next);
        if r_next < best_r {
            best = next.clone();
            best_r = r_next;
        }
        if r_next <= cfg.tol {
            return Ok(EquilibriumResult {
                f_star: next,
                residual_norm: r_next,
                iterations: k,
                converged: true,
                residual_trace: trace,
            });
        }
        let dg: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        inv.update(&step, &dg);
        f = next;
        g = g_next;
    }
    Ok(EquilibriumResult {
        f_star: best,
        residual_norm: best_r,
        iterations: cfg.max_iter,
        converged: false,
        residual_trace: trace,
    })
}

/// Plain `F_{k+1} = Phi(F_k)`; the reference the Broyden solution is compared with.
pub fn picard_solve(
    mut phi: impl FnMut(&Tensor4) -> Result<Tensor4>,
    f0: &Tensor4,
    tol: f64,
    max_iter: usize,
) -> Result<EquilibriumResult> {
    let mut f = f0.clone();
    let mut trace = Vec::new();
    for k in 0..=max_iter {
        let next = phi(&f)?;
        if !next.is_finite() {
            return Err(Error::SolverNonFinite(k));
        }
        let r = next.sub(&f)?.norm();
        trace.push(r);
        if r <= tol || k == max_iter {
            return Ok(EquilibriumResult {
                f_star: f,
                residual_norm: r,
                iterations: k,
                converged: r <= tol,
                residual_trace: trace,
            });
        }
        f = next;
    }
    unreachable!()
}

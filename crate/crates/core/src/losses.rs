//! Training objectives.
//!
//! * `L_eq = ||Phi(F) - F||_2` over the flattened state (not averaged).
//! * `L_ca = sum_{n,k} sum_{i,j} A ln(A h w)`, the KL divergence of every
//!   class map from the uniform spatial distribution.
//! * `L = lambda_det L_det + lambda_eq L_eq + lambda_ca L_ca`, where `L_det` is
//!   any externally computed scalar.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::class_adapt::ClassAttentionMaps;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Floor applied inside the logarithm of the KL term.
pub const KL_CLAMP: f64 = 1e-12;
/// Largest tolerated deviation of a map's spatial sum from one.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_eq: f64,
    pub lambda_ca: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_det: 1.0,
            lambda_eq: 0.5,
            lambda_ca: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 3] {
        [
            ("lambda_det", self.lambda_det),
            ("lambda_eq", self.lambda_eq),
            ("lambda_ca", self.lambda_ca),
        ]
    }
}

/// `||phi(f_star) - f_star||_2`.
pub fn equilibrium_loss(phi: impl FnOnce(&Tensor4) -> Result<Tensor4>, f_star: &Tensor4) -> Result<f64> {
    Ok(phi(f_star)?.sub(f_star)?.norm())
}

pub fn record_equilibrium_loss(tape: &mut Tape, phi_f: Var, f: Var) -> Result<Var> {
    let r = tape.sub(phi_f, f)?;
    tape.l2_norm(r)
}

fn kl_terms(a: &Tensor4) -> f64 {
    let hw = a.shape().plane() as f64;
    a.data().iter().map(|&p| p * (p.max(KL_CLAMP).ln() + hw.ln())).sum()
}

pub fn kl_uniform_loss(maps: &ClassAttentionMaps) -> Result<f64> {
    check_normalized(maps.tensor())?;
    Ok(kl_terms(maps.tensor()))
}

fn check_normalized(a: &Tensor4) -> Result<()> {
    let plane = a.shape().plane();
    for (idx, p) in a.data().chunks(plane).enumerate() {
        let s: f64 = p.iter().sum();
        if !((s - 1.0).abs() <= NORMALIZATION_TOL) {
            return Err(Error::InvalidArgument(format!(
                "attention map {idx} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Tape form of [`kl_uniform_loss`]; rejects non-normalized maps the same way.
pub fn record_kl_uniform(tape: &mut Tape, maps: Var) -> Result<Var> {
    check_normalized(tape.value(maps))?;
    let hw = tape.shape(maps).plane() as f64;
    let ln = tape.ln_clamped(maps, KL_CLAMP)?;
    let shifted = tape.add_scalar(ln, hw.ln())?;
    let terms = tape.mul(maps, shifted)?;
    tape.sum(terms)
}

/// Weighted sum of the three components.
pub fn total_loss(l_det: f64, l_eq: f64, l_ca: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_det", l_det), ("l_eq", l_eq), ("l_ca", l_ca)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    w.validate()?;
    Ok(w.lambda_det * l_det + w.lambda_eq * l_eq + w.lambda_ca * l_ca)
}

/// Tape form of [`total_loss`]; absent components contribute nothing.
pub fn record_total_loss(
    tape: &mut Tape,
    l_det: Option<Var>,
    l_eq: Option<Var>,
    l_ca: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut acc: Option<Var> = None;
    for (v, lambda) in [(l_det, w.lambda_det), (l_eq, w.lambda_eq), (l_ca, w.lambda_ca)] {
        let Some(v) = v else { continue };
        let t = tape.scale(v, lambda)?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor4::scalar(0.0)),
    })
}

/// Detection-loss stand-in: mean squared error against a fixed target.
pub fn record_mse(tape: &mut Tape, x: Var, target: &Tensor4) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(x, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn identity_phi_has_zero_loss() {
        let f = Tensor4::from_fn(Shape::new(1, 2, 3, 3), |_, c, i, j| (c * 9 + i * 3 + j) as f64);
        assert_eq!(equilibrium_loss(|x| Ok(x.clone()), &f).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_its_norm() {
        let c = Tensor4::from_fn(Shape::new(1, 1, 2, 2), |_, _, i, j| (i + 2 * j) as f64);
        let f = Tensor4::zeros(c.shape());
        let cc = c.clone();
        let l = equilibrium_loss(move |x| x.axpy(1.0, &cc), &f).unwrap();
        assert_eq!(l, c.norm());
    }

    #[test]
    fn kl_uniform_and_point_mass() {
        let u = ClassAttentionMaps::new(Tensor4::full(Shape::new(2, 3, 4, 4), 1.0 / 16.0), 1e-12).unwrap();
        assert!(kl_uniform_loss(&u).unwrap().abs() < 1e-12);
        let mut one_hot = Tensor4::zeros(Shape::new(1, 1, 4, 4));
        one_hot.set(0, 0, 2, 1, 1.0);
        let m = ClassAttentionMaps::new(one_hot, 1e-12).unwrap();
        assert!((kl_uniform_loss(&m).unwrap() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_defaults() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w).unwrap(), 1.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let sel = LossWeights {
            lambda_det: 0.0,
            lambda_eq: 0.0,
            lambda_ca: 1.0,
        };
        assert_eq!(total_loss(5.0, 7.0, 3.0, &sel).unwrap(), 3.0);
    }

    #[test]
    fn non_finite_component_is_named() {
        let err = total_loss(1.0, f64::NAN, 0.0, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("l_eq"), "{err}");
    }

    #[test]
    fn tape_total_matches_scalar_total() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor4::scalar(1.0));
        let b = tape.constant(Tensor4::scalar(1.0));
        let c = tape.constant(Tensor4::scalar(1.0));
        let t = record_total_loss(&mut tape, Some(a), Some(b), Some(c), &w).unwrap();
        assert_eq!(tape.value(t).item().unwrap(), 1.7);
    }
}

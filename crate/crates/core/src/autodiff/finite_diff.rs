//! Central finite differences over a [`ParamStore`].
//!
//! This is the independent oracle for the tape: it only ever calls the loss
//! as a black box.

use super::GradMap;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor4;

/// Default step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-6;

fn central(
    f: &mut impl FnMut(&ParamStore) -> Result<f64>,
    work: &mut ParamStore,
    name: &str,
    idx: usize,
    eps: f64,
) -> Result<f64> {
    let orig = work.get(name)?.data()[idx];
    work.get_mut(name)?.data_mut()[idx] = orig + eps;
    let plus = f(work)?;
    work.get_mut(name)?.data_mut()[idx] = orig - eps;
    let minus = f(work)?;
    work.get_mut(name)?.data_mut()[idx] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::FiniteDiffNonFinite(name.to_string()));
    }
    Ok((plus - minus) / (2.0 * eps))
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")))
    }
}

/// `(f(θ + eps·e_i) − f(θ − eps·e_i)) / (2·eps)` for every scalar of every parameter.
pub fn finite_diff_grad(
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    store: &ParamStore,
    eps: f64,
) -> Result<GradMap> {
    check_eps(eps)?;
    let mut work = store.clone();
    let mut out = GradMap::new();
    for (name, value) in store.iter() {
        let mut g = Tensor4::zeros(value.shape());
        for idx in 0..value.numel() {
            g.data_mut()[idx] = central(&mut f, &mut work, name, idx, eps)?;
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Central differences for selected `(parameter, flat index)` coordinates only.
pub fn finite_diff_coords(
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    store: &ParamStore,
    coords: &[(String, usize)],
    eps: f64,
) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let mut work = store.clone();
    coords
        .iter()
        .map(|(name, idx)| {
            let numel = store.get(name)?.numel();
            if *idx >= numel {
                return Err(Error::InvalidArgument(format!(
                    "index {idx} out of range for `{name}` ({numel} elements)"
                )));
            }
            central(&mut f, &mut work, name, *idx, eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn quadratic_derivative() {
        let mut s = ParamStore::new(0);
        s.insert("theta", Tensor4::scalar(3.0)).unwrap();
        let g = finite_diff_grad(|p| Ok(p.get("theta")?.data()[0].powi(2)), &s, 1e-6).unwrap();
        assert!((g.get("theta").unwrap().data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_gives_zeros() {
        let mut s = ParamStore::new(0);
        s.init_uniform("a", Shape::new(2, 3, 1, 1), 3).unwrap();
        s.init_uniform("b", Shape::new(4, 1, 1, 1), 1).unwrap();
        let g = finite_diff_grad(|_| Ok(1.25), &s, 1e-6).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_finite_names_parameter() {
        let mut s = ParamStore::new(0);
        s.insert("bad", Tensor4::scalar(0.0)).unwrap();
        let err = finite_diff_grad(|p| Ok(p.get("bad")?.data()[0].ln()), &s, 1e-6).unwrap_err();
        assert!(matches!(err, Error::FiniteDiffNonFinite(ref n) if n == "bad"));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let s = ParamStore::new(0);
        assert!(finite_diff_grad(|_| Ok(0.0), &s, 0.0).is_err());
    }
}

//! Dense reference computations for small fixed-point problems.
//!
//! These materialize the Jacobian, so they are limited to tiny states and
//! only serve as independent checks of the solver and the implicit backward.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Largest state the dense oracle accepts.
pub const MAX_DENSE_STATE: usize = 32;

/// Row-major `J[i][j] = d Phi_i / d f_j` by central differences.
pub fn dense_jacobian_fd(
    mut phi: impl FnMut(&Tensor4) -> Result<Tensor4>,
    f: &Tensor4,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = f.numel();
    if n > MAX_DENSE_STATE {
        return Err(Error::InvalidArgument(format!(
            "dense Jacobian oracle limited to {MAX_DENSE_STATE} elements, state has {n}"
        )));
    }
    let mut jac = vec![vec![0.0; n]; n];
    let mut work = f.clone();
    for j in 0..n {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + eps;
        let plus = phi(&work)?;
        work.data_mut()[j] = orig - eps;
        let minus = phi(&work)?;
        work.data_mut()[j] = orig;
        for (i, row) in jac.iter_mut().enumerate() {
            row[j] = (plus.data()[i] - minus.data()[i]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

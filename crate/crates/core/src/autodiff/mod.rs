//! Reverse-mode differentiation over the tensor primitives, plus the
//! central-difference oracle used to check it.

mod backward;
pub mod finite_diff;
mod tape;

use indexmap::IndexMap;

use crate::tensor::Tensor4;

pub use finite_diff::{finite_diff_coords, finite_diff_grad};
pub use tape::{FixedPointOperator, Gradients, LeafKind, Tape, Var};

/// Gradients keyed by parameter (or named input) name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(IndexMap<String, Tensor4>);

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor4) {
        self.0.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `grad` into the entry for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor4) -> crate::Result<()> {
        match self.0.get_mut(name) {
            Some(acc) => *acc = acc.axpy(1.0, grad)?,
            None => {
                self.0.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    /// Largest [`relative_error`] over every entry present in both maps.
    pub fn max_relative_error(&self, other: &GradMap) -> f64 {
        self.iter()
            .filter_map(|(k, a)| other.get(k).map(|b| (a, b)))
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .fold(0.0, |m, (&x, &y)| m.max(relative_error(x, y)))
    }
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

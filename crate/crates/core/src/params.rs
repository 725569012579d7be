//! Named, seeded parameter collections.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

/// 64-bit FNV-1a; stable across platforms and compiler versions.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic generator for `name` under `seed`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(name.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Learnable tensors keyed by name, in registration order.
///
/// Vectors are stored as `(len, 1, 1, 1)` and matrices as `(rows, cols, 1, 1)`.
/// Every initializer draws from a generator derived from the store seed and the
/// parameter name, so toggling one block on or off never shifts the values of
/// another block.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    entries: IndexMap<String, Tensor4>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Registers `name` with entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = named_rng(self.seed, name);
        self.insert(name, Tensor4::uniform(shape, -bound, bound, &mut rng))
    }

    pub fn init_zeros(&mut self, name: &str, shape: Shape) -> Result<()> {
        self.insert(name, Tensor4::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces the value of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor4) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {}, refusing {}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor4::numel).sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

/// Exact scalar count of every learnable element in `store`.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut s = ParamStore::new(42);
            s.init_uniform("a.w", Shape::new(3, 4, 1, 1), 4).unwrap();
            s.init_uniform("b.k", Shape::new(2, 1, 3, 3), 9).unwrap();
            s
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn values_do_not_depend_on_registration_neighbours() {
        let mut a = ParamStore::new(1);
        a.init_uniform("x", Shape::new(5, 1, 1, 1), 5).unwrap();
        let mut b = ParamStore::new(1);
        b.init_uniform("other", Shape::new(7, 1, 1, 1), 7).unwrap();
        b.init_uniform("x", Shape::new(5, 1, 1, 1), 5).unwrap();
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
    }

    #[test]
    fn uniform_bound_respected() {
        let mut s = ParamStore::new(3);
        s.init_uniform("w", Shape::new(64, 16, 1, 1), 16).unwrap();
        assert!(s.get("w").unwrap().max_abs() <= 0.25);
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new(0);
        s.init_zeros("w", Shape::SCALAR).unwrap();
        assert!(matches!(s.init_zeros("w", Shape::SCALAR), Err(Error::DuplicateParam(_))));
    }

    #[test]
    fn counts() {
        let mut s = ParamStore::new(0);
        assert_eq!(count_parameters(&s), 0);
        s.init_uniform("conv.w", Shape::new(3, 2, 1, 1), 2).unwrap();
        s.init_zeros("conv.b", Shape::new(3, 1, 1, 1)).unwrap();
        assert_eq!(count_parameters(&s), 9);
        assert_eq!(s.count_prefix("conv.w"), 6);
    }
}

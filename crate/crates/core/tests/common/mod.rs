#![allow(dead_code)]

use dycaf::autodiff::finite_diff::{finite_diff_grad, DEFAULT_EPS};
use dycaf::autodiff::relative_error;
use dycaf::params::named_rng;
use dycaf::{ParamStore, Result, Shape, Tape, Tensor4, Var};

pub fn randn(shape: Shape, seed: u64, tag: &str) -> Tensor4 {
    Tensor4::randn(shape, &mut named_rng(seed, tag))
}

pub fn store(entries: Vec<(&str, Tensor4)>) -> ParamStore {
    let mut s = ParamStore::new(0);
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

/// `sum(build(params) * r)` for a fixed random cotangent `r`.
pub fn projected_loss(
    tape: &mut Tape,
    s: &ParamStore,
    build: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    seed: u64,
) -> Result<Var> {
    let out = build(tape, s)?;
    let r = tape.constant(randn(tape.shape(out), seed, "cotangent"));
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

/// Largest relative error between tape gradients and central differences
/// over every scalar of every parameter.
pub fn max_grad_error(s: &ParamStore, build: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let loss = projected_loss(&mut tape, s, build, seed).unwrap();
    let analytic = tape.backward_params(loss, s).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let l = projected_loss(&mut t, p, build, seed)?;
            t.value(l).item()
        },
        s,
        DEFAULT_EPS,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for (name, a) in analytic.iter() {
        let b = numeric.get(name).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max(relative_error(*x, *y));
        }
    }
    worst
}

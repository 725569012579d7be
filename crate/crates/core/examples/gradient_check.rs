//! Reverse-mode gradients of a small graph against central differences.
//!
//! `cargo run --example gradient_check`

use dycaf::autodiff::finite_diff::{finite_diff_grad, DEFAULT_EPS};
use dycaf::params::named_rng;
use dycaf::tensor::ops::SoftmaxAxis;
use dycaf::{ParamStore, Result, Shape, Tape, Tensor4, Var};

fn loss(tape: &mut Tape, s: &ParamStore) -> Result<Var> {
    let x = tape.param(s, "x")?;
    let w = tape.param(s, "w")?;
    let k = tape.param(s, "k")?;
    let h = tape.conv1x1(x, w, None)?;
    let h = tape.depthwise(h, k, None)?;
    let h = tape.silu(h)?;
    let a = tape.softmax(h, SoftmaxAxis::Spatial)?;
    let prod = tape.mul(a, h)?;
    tape.sum(prod)
}

fn main() -> Result<()> {
    let mut rng = named_rng(1, "example");
    let mut s = ParamStore::new(1);
    s.insert("x", Tensor4::randn(Shape::new(1, 3, 5, 5), &mut rng))?;
    s.insert("w", Tensor4::randn(Shape::new(4, 3, 1, 1), &mut rng))?;
    s.insert("k", Tensor4::randn(Shape::new(4, 1, 3, 3), &mut rng))?;

    let mut tape = Tape::new();
    let l = loss(&mut tape, &s)?;
    println!("loss {:.6} on a tape of {} nodes", tape.value(l).item()?, tape.len());
    let analytic = tape.backward_params(l, &s)?;
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let l = loss(&mut t, p)?;
            t.value(l).item()
        },
        &s,
        DEFAULT_EPS,
    )?;
    for (name, g) in analytic.iter() {
        let mut one = dycaf::GradMap::new();
        one.insert(name, g.clone());
        let mut other = dycaf::GradMap::new();
        other.insert(name, numeric.get(name).unwrap().clone());
        println!("{name}: {} entries, max relative error {:.2e}", g.numel(), one.max_relative_error(&other));
    }
    Ok(())
}

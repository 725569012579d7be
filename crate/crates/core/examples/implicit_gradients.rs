//! Gradients through a fixed point of a user-defined operator.
//!
//! `Phi(f) = tanh(W f + b) / 2` on a `(1, 4, 1, 1)` state. The implicit
//! gradient is compared with differentiating 40 unrolled iterations.
//!
//! `cargo run --example implicit_gradients`

use std::sync::Arc;

use dycaf::autodiff::FixedPointOperator;
use dycaf::params::named_rng;
use dycaf::tensor::ops::Activation;
use dycaf::{ParamStore, Result, Shape, SolverConfig, Tape, Tensor4, Var};

struct HalfTanh;

impl FixedPointOperator for HalfTanh {
    fn record(&self, tape: &mut Tape, state: Var, inputs: &[Var]) -> Result<Var> {
        // tanh(z) = 2 sigmoid(2z) - 1
        let z = tape.conv1x1(state, inputs[0], Some(inputs[1]))?;
        let z = tape.scale(z, 2.0)?;
        let s = tape.activation(z, Activation::Sigmoid)?;
        let t = tape.add_scalar(s, -0.5)?;
        Ok(t)
    }
}

fn main() -> Result<()> {
    let mut rng = named_rng(4, "example");
    let mut store = ParamStore::new(4);
    store.insert("w", Tensor4::randn(Shape::new(4, 4, 1, 1), &mut rng).scale(0.5))?;
    store.insert("b", Tensor4::randn(Shape::new(4, 1, 1, 1), &mut rng))?;
    let f0 = Tensor4::zeros(Shape::new(1, 4, 1, 1));
    let cfg = SolverConfig { tol: 1e-12, max_iter: 200, ..SolverConfig::default() };

    let mut tape = Tape::new();
    let w = tape.param(&store, "w")?;
    let b = tape.param(&store, "b")?;
    let (f_star, result) = tape.fixed_point(Arc::new(HalfTanh), &[w, b], &f0, &cfg)?;
    println!("solved in {} iterations, residual {:.1e}", result.iterations, result.residual_norm);
    let loss = tape.sum(f_star)?;
    let implicit = tape.backward_params(loss, &store)?;

    let mut unrolled_tape = Tape::new();
    let w = unrolled_tape.param(&store, "w")?;
    let b = unrolled_tape.param(&store, "b")?;
    let mut f = unrolled_tape.constant(f0);
    for _ in 0..40 {
        f = HalfTanh.record(&mut unrolled_tape, f, &[w, b])?;
    }
    let loss = unrolled_tape.sum(f)?;
    let unrolled = unrolled_tape.backward_params(loss, &store)?;
    println!(
        "max relative difference implicit vs 40 unrolled steps: {:.2e}",
        implicit.max_relative_error(&unrolled)
    );
    println!("dL/db = {:.6?}", implicit.get("b").unwrap().data());
    Ok(())
}

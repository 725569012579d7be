//! Loss terms on the tape and their weighted total.
//!
//! `cargo run --example losses`

use dycaf::losses::{record_equilibrium_loss, record_kl_uniform, record_mse, record_total_loss, total_loss, LossWeights};
use dycaf::params::named_rng;
use dycaf::tensor::ops::SoftmaxAxis;
use dycaf::{ParamStore, Result, Shape, Tape, Tensor4};

fn main() -> Result<()> {
    let w = LossWeights::default();
    println!("weights {w:?}; total_loss(1, 1, 1) = {:?}", total_loss(1.0, 1.0, 1.0, &w)?);

    let mut rng = named_rng(6, "example");
    let mut s = ParamStore::new(6);
    s.insert("f", Tensor4::randn(Shape::new(1, 2, 4, 4), &mut rng))?;
    s.insert("logits", Tensor4::randn(Shape::new(1, 3, 4, 4), &mut rng))?;
    let target = Tensor4::zeros(Shape::new(1, 2, 4, 4));

    let mut tape = Tape::new();
    let f = tape.param(&s, "f")?;
    let det = record_mse(&mut tape, f, &target)?;
    let phi_f = tape.scale(f, 0.5)?;
    let eq = record_equilibrium_loss(&mut tape, phi_f, f)?;
    let logits = tape.param(&s, "logits")?;
    let maps = tape.softmax(logits, SoftmaxAxis::Spatial)?;
    let ca = record_kl_uniform(&mut tape, maps)?;
    let total = record_total_loss(&mut tape, Some(det), Some(eq), Some(ca), &w)?;
    for (name, v) in [("L_det", det), ("L_eq", eq), ("L_ca", ca), ("total", total)] {
        println!("{name:>6} = {:.6}", tape.value(v).item()?);
    }
    let grads = tape.backward_params(total, &s)?;
    for (name, g) in grads.iter() {
        println!("|d total / d {name}| = {:.4}", g.norm());
    }
    Ok(())
}

//! One dual-attention block: channel gates, spatial mask and output.
//!
//! `cargo run --example dual_attention`

use dycaf::attention::{channel_weights, dual_attention_forward, dynamic_gap, init_block, spatial_mask, DualAttentionParams};
use dycaf::params::named_rng;
use dycaf::{ParamStore, Result, Shape, Tensor4};

fn main() -> Result<()> {
    let params = DualAttentionParams::new("demo", 32)?;
    let mut store = ParamStore::new(2);
    params.register(&mut store)?;
    println!("{} parameters under `{}`", params.count(), params.prefix);

    let x = Tensor4::randn(Shape::new(2, 32, 12, 12), &mut named_rng(2, "features"));
    let x_init = init_block(&x, &store, &params)?;
    let g = dynamic_gap(&x_init, &store, &params)?;
    let w_c = channel_weights(&g, &store, &params)?;
    let m_s = spatial_mask(&x_init, &store, &params)?;
    let (lo, hi) = w_c.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("channel gates in [{lo:.3}, {hi:.3}], spatial mask {}", m_s.shape());

    let out = dual_attention_forward(&x, &store, &params)?;
    let delta = out.sub(&x)?;
    println!("output {}; residual branch norm {:.4} vs input {:.4}", out.shape(), delta.norm(), x.norm());

    let alg1 = params.clone().with_alg1_spatial(true);
    let mut s2 = ParamStore::new(2);
    alg1.register(&mut s2)?;
    let out2 = dual_attention_forward(&x, &s2, &alg1)?;
    println!("per-channel spatial variant: {} parameters, output {}", alg1.count(), out2.shape());
    Ok(())
}

//! Tensor construction and the forward kernels.
//!
//! `cargo run --example tensor_primitives`

use dycaf::params::named_rng;
use dycaf::tensor::ops::{self, Activation, PoolMode, Resample, SoftmaxAxis};
use dycaf::{Result, Shape, Tensor4};

fn main() -> Result<()> {
    let mut rng = named_rng(0, "example");
    let x = Tensor4::randn(Shape::new(1, 4, 8, 8), &mut rng);
    println!("x: {} (checksum {:016x})", x.shape(), x.checksum());

    let w = Tensor4::randn(Shape::new(2, 4, 1, 1), &mut rng);
    let y = ops::conv1x1(&x, &w, None)?;
    println!("conv1x1 4->2: {}", y.shape());

    let k = Tensor4::randn(Shape::new(4, 1, 3, 3), &mut rng);
    let d = ops::depthwise_conv(&x, &k, None)?;
    println!("depthwise 3x3: {}, |d| = {:.4}", d.shape(), d.norm());

    let (avg, _) = ops::channel_pool(&x, PoolMode::Avg);
    let (max, argmax) = ops::channel_pool(&x, PoolMode::Max);
    println!(
        "channel pools: avg {}, max {} (first argmax {})",
        avg.shape(),
        max.shape(),
        argmax.unwrap()[0]
    );

    let down = ops::resample(&x, Resample::Down2)?;
    let up = ops::resample(&down, Resample::Up2)?;
    println!("down2 {} -> up2 {}", down.shape(), up.shape());

    let s = ops::softmax(&x, SoftmaxAxis::Spatial);
    println!("spatial softmax, first plane sums to {:.15}", s.data()[..64].iter().sum::<f64>());

    let a = ops::activation(&x, Activation::Silu);
    println!("silu mean {:.4}", a.sum() / a.numel() as f64);
    Ok(())
}

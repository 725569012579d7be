//! Tape gradients of every primitive against central differences on random
//! instances.

mod common;

use common::{max_grad_error, randn, store};
use dycaf::tensor::ops::{Activation, EwOp, PoolMode, Resample, SoftmaxAxis};
use dycaf::{ParamStore, Result, Shape, Tape, Var};
use proptest::prelude::*;

const GATE: f64 = 1e-5;

fn small_shape() -> impl Strategy<Value = Shape> {
    (1usize..=2, 1usize..=3, 1usize..=4, 1usize..=4).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

fn even_shape() -> impl Strategy<Value = Shape> {
    (1usize..=2, 1usize..=3, 1usize..=2, 1usize..=2).prop_map(|(n, c, h, w)| Shape::new(n, c, 2 * h, 2 * w))
}

fn x(s: &ParamStore, t: &mut Tape) -> Result<Var> {
    t.param(s, "x")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv1x1_gradients(shape in small_shape(), c_out in 1usize..=3, seed in any::<u64>()) {
        let s = store(vec![
            ("x", randn(shape, seed, "x")),
            ("w", randn(Shape::new(c_out, shape.c, 1, 1), seed, "w")),
            ("b", randn(Shape::new(c_out, 1, 1, 1), seed, "b")),
        ]);
        let err = max_grad_error(&s, &|t, s| {
            let (xv, w, b) = (x(s, t)?, t.param(s, "w")?, t.param(s, "b")?);
            t.conv1x1(xv, w, Some(b))
        }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn depthwise_gradients(shape in small_shape(), big in any::<bool>(), seed in any::<u64>()) {
        let k = if big { 7 } else { 3 };
        let s = store(vec![
            ("x", randn(shape, seed, "x")),
            ("k", randn(Shape::new(shape.c, 1, k, k), seed, "k")),
            ("b", randn(Shape::new(shape.c, 1, 1, 1), seed, "b")),
        ]);
        let err = max_grad_error(&s, &|t, s| {
            let (xv, kv, b) = (x(s, t)?, t.param(s, "k")?, t.param(s, "b")?);
            t.depthwise(xv, kv, Some(b))
        }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn channel_pool_gradients(shape in small_shape(), max in any::<bool>(), seed in any::<u64>()) {
        let mode = if max { PoolMode::Max } else { PoolMode::Avg };
        let s = store(vec![("x", randn(shape, seed, "x"))]);
        let err = max_grad_error(&s, &|t, s| { let v = x(s, t)?; t.channel_pool(v, mode) }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn global_avg_pool_gradients(shape in small_shape(), seed in any::<u64>()) {
        let s = store(vec![("x", randn(shape, seed, "x"))]);
        let err = max_grad_error(&s, &|t, s| { let v = x(s, t)?; t.global_avg_pool(v) }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn activation_gradients(shape in small_shape(), kind in 0usize..3, seed in any::<u64>()) {
        let kind = [Activation::Sigmoid, Activation::Silu, Activation::Relu][kind];
        let s = store(vec![("x", randn(shape, seed, "x"))]);
        let err = max_grad_error(&s, &|t, s| { let v = x(s, t)?; t.activation(v, kind) }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn softmax_gradients(shape in small_shape(), spatial in any::<bool>(), seed in any::<u64>()) {
        let axis = if spatial { SoftmaxAxis::Spatial } else { SoftmaxAxis::Channel };
        let s = store(vec![("x", randn(shape, seed, "x").scale(3.0))]);
        let err = max_grad_error(&s, &|t, s| { let v = x(s, t)?; t.softmax(v, axis) }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn resample_gradients(shape in even_shape(), up in any::<bool>(), seed in any::<u64>()) {
        let mode = if up { Resample::Up2 } else { Resample::Down2 };
        let s = store(vec![("x", randn(shape, seed, "x"))]);
        let err = max_grad_error(&s, &|t, s| { let v = x(s, t)?; t.resample(v, mode) }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn concat_and_slice_gradients(shape in small_shape(), c2 in 1usize..=3, seed in any::<u64>()) {
        let s = store(vec![
            ("x", randn(shape, seed, "x")),
            ("y", randn(shape.with_c(c2), seed, "y")),
        ]);
        let total = shape.c + c2;
        let err = max_grad_error(&s, &|t, s| {
            let (a, b) = (x(s, t)?, t.param(s, "y")?);
            let cat = t.concat(&[a, b, a])?;
            let part = t.slice_channels(cat, 1, total)?;
            t.mul(part, part)
        }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn broadcast_elementwise_gradients(
        shape in small_shape(),
        op in 0usize..3,
        pattern in 0usize..3,
        seed in any::<u64>(),
    ) {
        let op = [EwOp::Add, EwOp::Sub, EwOp::Mul][op];
        let other = match pattern {
            0 => shape,
            1 => Shape::new(shape.n, shape.c, 1, 1),
            _ => Shape::new(shape.n, 1, shape.h, shape.w),
        };
        let s = store(vec![("x", randn(shape, seed, "x")), ("y", randn(other, seed, "y"))]);
        let err = max_grad_error(&s, &|t, s| {
            let (a, b) = (x(s, t)?, t.param(s, "y")?);
            t.ew(b, a, op)
        }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn scalar_reduction_gradients(shape in small_shape(), which in 0usize..4, seed in any::<u64>()) {
        let s = store(vec![("x", randn(shape, seed, "x"))]);
        let err = max_grad_error(&s, &|t, s| {
            let v = x(s, t)?;
            match which {
                0 => t.sum(v),
                1 => t.mean(v),
                2 => t.l2_norm(v),
                _ => { let y = t.scale(v, -1.7)?; t.add_scalar(y, 0.3) }
            }
        }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn log_gradients(shape in small_shape(), seed in any::<u64>()) {
        // strictly above the clamp so the log is smooth
        let v = randn(shape, seed, "x").map(|a| 0.2 + a.abs());
        let s = store(vec![("x", v)]);
        let err = max_grad_error(&s, &|t, s| { let v = x(s, t)?; t.ln_clamped(v, 1e-12) }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn composite_conv_silu_softmax(shape in small_shape(), seed in any::<u64>()) {
        let s = store(vec![
            ("x", randn(shape, seed, "x")),
            ("w", randn(Shape::new(3, shape.c, 1, 1), seed, "w")),
        ]);
        let err = max_grad_error(&s, &|t, s| {
            let (xv, w) = (x(s, t)?, t.param(s, "w")?);
            let y = t.conv1x1(xv, w, None)?;
            let y = t.silu(y)?;
            t.softmax(y, SoftmaxAxis::Spatial)
        }, seed);
        prop_assert!(err < GATE, "{err}");
    }

    #[test]
    fn gradients_are_linear_in_the_loss(shape in small_shape(), seed in any::<u64>()) {
        let s = store(vec![("x", randn(shape, seed, "x"))]);
        let grad = |which: u8| {
            let mut t = Tape::new();
            let v = t.param(&s, "x").unwrap();
            let a = t.silu(v).unwrap();
            let a = t.sum(a).unwrap();
            let b = t.mul(v, v).unwrap();
            let b = t.mean(b).unwrap();
            let l = match which { 0 => a, 1 => b, _ => t.add(a, b).unwrap() };
            t.backward(l, &["x"]).unwrap().get("x").unwrap().clone()
        };
        let (ga, gb, gab) = (grad(0), grad(1), grad(2));
        let sum = ga.axpy(1.0, &gb).unwrap();
        prop_assert!(sum.sub(&gab).unwrap().max_abs() <= 1e-14);
    }
}

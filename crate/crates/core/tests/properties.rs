//! Invariants over random inputs.

mod common;

use common::randn;
use dycaf::class_adapt::{adapt_features, ClassAdaptMode, ClassAdaptParams, ClassAttentionMaps};
use dycaf::kmeans::kmeans;
use dycaf::losses::{equilibrium_loss, kl_uniform_loss, total_loss, LossWeights};
use dycaf::neck::{neck_forward, FeaturePyramid, Neck, NeckConfig};
use dycaf::params::named_rng;
use dycaf::tensor::io::{read_dt4, write_dt4, Dtype};
use dycaf::tensor::ops::{softmax, SoftmaxAxis};
use dycaf::{Error, ParamStore, Shape, Tensor4};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..=3, 1usize..=4, 1usize..=5, 1usize..=5).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

fn maps(shape: Shape, seed: u64, temp: f64) -> ClassAttentionMaps {
    let t = softmax(&randn(shape, seed, "logits").scale(temp), SoftmaxAxis::Spatial);
    ClassAttentionMaps::new(t, 1e-12).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_slices_are_distributions(s in shape(), seed in any::<u64>(), temp in 0.0f64..30.0) {
        let x = randn(s, seed, "x").scale(temp);
        let ch = softmax(&x, SoftmaxAxis::Channel);
        let sp = softmax(&x, SoftmaxAxis::Spatial);
        prop_assert!(ch.data().iter().chain(sp.data()).all(|&v| v >= 0.0));
        for plane in sp.data().chunks(s.plane()) {
            prop_assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for n in 0..s.n {
            for p in 0..s.plane() {
                let total: f64 = (0..s.c).map(|c| ch.data()[(n * s.c + c) * s.plane() + p]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_to_uniform_is_nonnegative_and_bounded(s in shape(), seed in any::<u64>(), temp in 0.0f64..50.0) {
        let m = maps(s, seed, temp);
        let kl = kl_uniform_loss(&m).unwrap();
        // each map contributes at most ln(hw)
        let bound = (s.n * s.c) as f64 * (s.plane() as f64).ln();
        prop_assert!(kl >= -1e-12 && kl <= bound + 1e-9, "{kl} vs {bound}");
    }

    #[test]
    fn total_loss_is_bilinear(
        l in prop::array::uniform3(0.0f64..10.0),
        w in prop::array::uniform3(0.0f64..2.0),
        a in 0.0f64..3.0,
    ) {
        let lw = LossWeights { lambda_det: w[0], lambda_eq: w[1], lambda_ca: w[2] };
        let base = total_loss(l[0], l[1], l[2], &lw).unwrap();
        let scaled = total_loss(a * l[0], a * l[1], a * l[2], &lw).unwrap();
        prop_assert!((scaled - a * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
        let parts: f64 = (0..3)
            .map(|i| {
                let mut only = [0.0; 3];
                only[i] = l[i];
                total_loss(only[0], only[1], only[2], &lw).unwrap()
            })
            .sum();
        prop_assert!((parts - base).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn equilibrium_loss_ignores_element_order(s in shape(), seed in any::<u64>()) {
        let f = randn(s, seed, "f");
        let phi = |t: &Tensor4| Ok(t.map(|v| (0.7 * v).tanh() + 0.1));
        let mut idx: Vec<usize> = (0..s.numel()).collect();
        idx.shuffle(&mut named_rng(seed, "perm"));
        let permuted = Tensor4::new(s, idx.iter().map(|&i| f.data()[i]).collect()).unwrap();
        let a = equilibrium_loss(phi, &f).unwrap();
        let b = equilibrium_loss(phi, &permuted).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn adapted_features_are_linear_in_the_features(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let p = ClassAdaptParams::new("cls", 4, 3, ClassAdaptMode::Prototype).unwrap();
        let mut s = ParamStore::new(seed);
        p.register(&mut s).unwrap();
        let shape = Shape::new(1, 4, 3, 3);
        let (f1, f2) = (randn(shape, seed, "f1"), randn(shape, seed, "f2"));
        let m = maps(Shape::new(1, 3, 3, 3), seed, 1.0);
        let mix = f1.scale(a).axpy(b, &f2).unwrap();
        let lhs = adapt_features(&mix, &m, &s, &p).unwrap();
        let rhs = adapt_features(&f1, &m, &s, &p).unwrap().scale(a)
            .axpy(b, &adapt_features(&f2, &m, &s, &p).unwrap()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn kmeans_ignores_sample_order(seed in any::<u64>(), k in 1usize..=4) {
        let mut rng = named_rng(seed, "samples");
        let samples: Vec<Vec<f64>> = (0..24)
            .map(|_| Tensor4::randn(Shape::new(1, 1, 1, 3), &mut rng).into_data())
            .collect();
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut named_rng(seed, "order"));
        let a = kmeans(&samples, k, seed).unwrap();
        let b = kmeans(&shuffled, k, seed).unwrap();
        prop_assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn dt4_files_round_trip(s in shape(), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let t = randn(s, seed, "t").scale(1e3);
        let p64 = dir.path().join("a.dt4");
        write_dt4(&p64, &t, Dtype::F64).unwrap();
        prop_assert!(read_dt4(&p64).unwrap().bit_eq(&t));
        let p32 = dir.path().join("b.dt4");
        write_dt4(&p32, &t, Dtype::F32).unwrap();
        let back = read_dt4(&p32).unwrap();
        prop_assert!(back.data().iter().zip(t.data()).all(|(x, y)| *x == (*y as f32) as f64));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn neck_preserves_pyramid_shapes(
        batch in 1usize..=2,
        half_hw in 2usize..=4,
        switches in (any::<bool>(), any::<bool>(), any::<bool>()),
        conv_head in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut cfg = NeckConfig::default().with_switches(switches.0, switches.1, switches.2);
        if conv_head {
            cfg.class_adapt_mode = ClassAdaptMode::Conv;
        }
        let pyr = FeaturePyramid::random(batch, 16, 4 * half_hw, &mut named_rng(seed, "pyr")).unwrap();
        let neck = Neck::prepare(cfg.clone(), seed, &pyr).unwrap();
        let out = neck_forward(&pyr, &neck).unwrap();
        prop_assert_eq!(out.pyramid.shapes(), pyr.shapes());
        prop_assert!(out.pyramid.levels().iter().all(|l| l.is_finite()));
        prop_assert_eq!(out.maps.is_some(), cfg.use_class_adapt);
        if let Some(maps) = &out.maps {
            for m in maps {
                prop_assert_eq!(m.num_classes(), cfg.num_classes);
                prop_assert!(m.max_sum_deviation() < 1e-12);
            }
        }
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dt4(dir.path().join("absent.dt4")), Err(Error::Io(_))));
}

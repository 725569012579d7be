//! Dynamic dual attention.
//!
//! ```text
//! x_init = silu(pw(dw3x3(x)))
//! m      = sigmoid(W_b silu(W_a x_init + a) + b)          per pixel, shared by channels
//! g      = mean_{i,j} x_init[:, i, j] * m[i, j]           dynamic GAP
//! w_c    = sigmoid(W2 silu(W1 g + b1) + b2)               channel weights
//! M_s    = sigmoid(conv7x7([avg_c(x_init); max_c(x_init)]) + b)
//! out    = x + x_init * w_c * M_s
//! ```
//!
//! With `alg1_spatial` the mask convolves `x_init` directly instead of the two
//! pooled maps.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::ops::PoolMode;
use crate::tensor::{Shape, Tensor4};

/// Hidden width of the per-pixel weighting MLP.
pub const GAP_HIDDEN: usize = 512;
/// Channel squeeze ratio of the bottleneck.
pub const SQUEEZE_RATIO: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualAttentionParams {
    /// `attn.<block-id>`
    pub prefix: String,
    pub channels: usize,
    pub alg1_spatial: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct DualAttentionVars {
    pub init_dw: Var,
    pub init_pw_w: Var,
    pub init_pw_b: Var,
    pub gap_w1: Var,
    pub gap_b1: Var,
    pub gap_w2: Var,
    pub gap_b2: Var,
    pub ch_w1: Var,
    pub ch_b1: Var,
    pub ch_w2: Var,
    pub ch_b2: Var,
    pub sp_k: Var,
    pub sp_b: Var,
}

const TENSORS: [&str; 13] = [
    "init.dw.k",
    "init.pw.w",
    "init.pw.b",
    "gap.w1",
    "gap.b1",
    "gap.w2",
    "gap.b2",
    "ch.w1",
    "ch.b1",
    "ch.w2",
    "ch.b2",
    "sp.k",
    "sp.b",
];

impl DualAttentionParams {
    pub fn new(block_id: &str, channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(SQUEEZE_RATIO) {
            return Err(Error::InvalidArgument(format!(
                "dual attention needs channels divisible by {SQUEEZE_RATIO}, got {channels}"
            )));
        }
        Ok(Self {
            prefix: format!("attn.{block_id}"),
            channels,
            alg1_spatial: false,
        })
    }

    pub fn with_alg1_spatial(mut self, on: bool) -> Self {
        self.alg1_spatial = on;
        self
    }

    pub fn name(&self, tensor: &str) -> String {
        format!("{}.{tensor}", self.prefix)
    }

    fn squeezed(&self) -> usize {
        self.channels / SQUEEZE_RATIO
    }

    fn spatial_in(&self) -> usize {
        if self.alg1_spatial {
            self.channels
        } else {
            2
        }
    }

    fn shapes(&self) -> [(Shape, usize); 13] {
        let (c, r, h) = (self.channels, self.squeezed(), GAP_HIDDEN);
        let k = SPATIAL_KERNEL;
        let si = self.spatial_in();
        [
            (Shape::new(c, 1, 3, 3), 9),
            (Shape::new(c, c, 1, 1), c),
            (Shape::new(c, 1, 1, 1), c),
            (Shape::new(h, c, 1, 1), c),
            (Shape::new(h, 1, 1, 1), c),
            (Shape::new(1, h, 1, 1), h),
            (Shape::new(1, 1, 1, 1), h),
            (Shape::new(r, c, 1, 1), c),
            (Shape::new(r, 1, 1, 1), c),
            (Shape::new(c, r, 1, 1), r),
            (Shape::new(c, 1, 1, 1), r),
            (Shape::new(si, 1, k, k), si * k * k),
            (Shape::new(1, 1, 1, 1), si * k * k),
        ]
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (t, (shape, fan_in)) in TENSORS.iter().zip(self.shapes()) {
            store.init_uniform(&self.name(t), shape, fan_in)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<DualAttentionVars> {
        let v = TENSORS
            .iter()
            .map(|t| tape.param(store, &self.name(t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DualAttentionVars {
            init_dw: v[0],
            init_pw_w: v[1],
            init_pw_b: v[2],
            gap_w1: v[3],
            gap_b1: v[4],
            gap_w2: v[5],
            gap_b2: v[6],
            ch_w1: v[7],
            ch_b1: v[8],
            ch_w2: v[9],
            ch_b2: v[10],
            sp_k: v[11],
            sp_b: v[12],
        })
    }

    /// Closed form: `9c + c^2 + c` (init block) `+ 512c + 1024 + 1` (GAP MLP)
    /// `+ 2c^2/r + c/r + c` (bottleneck) `+ 49k + 1` (mask, k = 2 or c inputs).
    pub fn count(&self) -> usize {
        let (c, r) = (self.channels, self.squeezed());
        let init = 9 * c + c * c + c;
        let gap = GAP_HIDDEN * c + GAP_HIDDEN + GAP_HIDDEN + 1;
        let bottleneck = 2 * r * c + r + c;
        let mask = SPATIAL_KERNEL * SPATIAL_KERNEL * self.spatial_in() + 1;
        init + gap + bottleneck + mask
    }
}

/// Per-pixel spatial weights `m`, shape `(n, 1, h, w)`.
pub fn record_gap_weights(tape: &mut Tape, x: Var, p: &DualAttentionVars) -> Result<Var> {
    let h = tape.conv1x1(x, p.gap_w1, Some(p.gap_b1))?;
    let h = tape.silu(h)?;
    let m = tape.conv1x1(h, p.gap_w2, Some(p.gap_b2))?;
    tape.sigmoid(m)
}

pub fn record_dynamic_gap(tape: &mut Tape, x: Var, p: &DualAttentionVars) -> Result<Var> {
    let m = record_gap_weights(tape, x, p)?;
    let weighted = tape.mul(x, m)?;
    tape.global_avg_pool(weighted)
}

pub fn record_channel_weights(tape: &mut Tape, g: Var, p: &DualAttentionVars) -> Result<Var> {
    let z = tape.conv1x1(g, p.ch_w1, Some(p.ch_b1))?;
    let z = tape.silu(z)?;
    let z = tape.conv1x1(z, p.ch_w2, Some(p.ch_b2))?;
    tape.sigmoid(z)
}

/// Sum over channels followed by the mask bias: a full `k_in -> 1` 7x7 conv
/// written as depthwise 7x7 plus a fixed all-ones 1x1 reduction.
fn reduce_to_mask(tape: &mut Tape, per_channel: Var, bias: Var) -> Result<Var> {
    let c = tape.shape(per_channel).c;
    let ones = tape.constant(Tensor4::ones(Shape::new(1, c, 1, 1)));
    let logits = tape.conv1x1(per_channel, ones, Some(bias))?;
    tape.sigmoid(logits)
}

pub fn record_spatial_mask(
    tape: &mut Tape,
    x: Var,
    p: &DualAttentionVars,
    alg1_spatial: bool,
) -> Result<Var> {
    let src = if alg1_spatial {
        x
    } else {
        let avg = tape.channel_pool(x, PoolMode::Avg)?;
        let max = tape.channel_pool(x, PoolMode::Max)?;
        tape.concat(&[avg, max])?
    };
    let conv = tape.depthwise(src, p.sp_k, None)?;
    reduce_to_mask(tape, conv, p.sp_b)
}

/// `depthwise 3x3 -> pointwise 1x1 -> silu`.
pub fn record_init_block(tape: &mut Tape, x: Var, p: &DualAttentionVars) -> Result<Var> {
    let d = tape.depthwise(x, p.init_dw, None)?;
    let pw = tape.conv1x1(d, p.init_pw_w, Some(p.init_pw_b))?;
    tape.silu(pw)
}

pub fn record_dual_attention(
    tape: &mut Tape,
    x: Var,
    p: &DualAttentionVars,
    alg1_spatial: bool,
) -> Result<Var> {
    let x_init = record_init_block(tape, x, p)?;
    let g = record_dynamic_gap(tape, x_init, p)?;
    let w_c = record_channel_weights(tape, g, p)?;
    let m_s = record_spatial_mask(tape, x_init, p, alg1_spatial)?;
    let gated = tape.mul(x_init, w_c)?;
    let gated = tape.mul(gated, m_s)?;
    tape.add(x, gated)
}

fn eval(
    store: &ParamStore,
    params: &DualAttentionParams,
    x: &Tensor4,
    f: impl FnOnce(&mut Tape, Var, &DualAttentionVars) -> Result<Var>,
) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, store)?;
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn dynamic_gap(x: &Tensor4, store: &ParamStore, params: &DualAttentionParams) -> Result<Tensor4> {
    eval(store, params, x, record_dynamic_gap)
}

pub fn channel_weights(g: &Tensor4, store: &ParamStore, params: &DualAttentionParams) -> Result<Tensor4> {
    eval(store, params, g, record_channel_weights)
}

pub fn spatial_mask(x: &Tensor4, store: &ParamStore, params: &DualAttentionParams) -> Result<Tensor4> {
    let alg1 = params.alg1_spatial;
    eval(store, params, x, |t, x, p| record_spatial_mask(t, x, p, alg1))
}

pub fn init_block(x: &Tensor4, store: &ParamStore, params: &DualAttentionParams) -> Result<Tensor4> {
    eval(store, params, x, record_init_block)
}

pub fn dual_attention_forward(
    x: &Tensor4,
    store: &ParamStore,
    params: &DualAttentionParams,
) -> Result<Tensor4> {
    let alg1 = params.alg1_spatial;
    eval(store, params, x, |t, x, p| record_dual_attention(t, x, p, alg1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::SeedableRng;

    fn setup(c: usize) -> (ParamStore, DualAttentionParams) {
        let p = DualAttentionParams::new("t", c).unwrap();
        let mut s = ParamStore::new(5);
        p.register(&mut s).unwrap();
        (s, p)
    }

    fn zero(s: &mut ParamStore, p: &DualAttentionParams, t: &str) {
        let shape = s.get(&p.name(t)).unwrap().shape();
        s.set(&p.name(t), Tensor4::zeros(shape)).unwrap();
    }

    fn fill(s: &mut ParamStore, p: &DualAttentionParams, t: &str, v: f64) {
        let shape = s.get(&p.name(t)).unwrap().shape();
        s.set(&p.name(t), Tensor4::full(shape, v)).unwrap();
    }

    #[test]
    fn channels_must_divide_by_ratio() {
        assert!(DualAttentionParams::new("x", 24).is_err());
        assert!(DualAttentionParams::new("x", 32).is_ok());
    }

    #[test]
    fn count_matches_registered_store() {
        for c in [16, 32, 64] {
            let (s, p) = setup(c);
            assert_eq!(p.count(), s.count());
        }
        let p = DualAttentionParams::new("a", 16).unwrap().with_alg1_spatial(true);
        let mut s = ParamStore::new(0);
        p.register(&mut s).unwrap();
        assert_eq!(p.count(), s.count());
    }

    #[test]
    fn saturated_mlp_reduces_to_gap() {
        let (mut s, p) = setup(16);
        zero(&mut s, &p, "gap.w2");
        fill(&mut s, &p, "gap.b2", 40.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::randn(Shape::new(2, 16, 5, 3), &mut rng);
        let d = dynamic_gap(&x, &s, &p).unwrap();
        assert_eq!(d, ops::global_avg_pool(&x));
    }

    #[test]
    fn annihilating_mlp_zeroes_gap() {
        let (mut s, p) = setup(16);
        zero(&mut s, &p, "gap.w2");
        fill(&mut s, &p, "gap.b2", -800.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::randn(Shape::new(1, 16, 3, 3), &mut rng);
        assert!(dynamic_gap(&x, &s, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_bottleneck_gives_half() {
        let (mut s, p) = setup(16);
        zero(&mut s, &p, "ch.w1");
        zero(&mut s, &p, "ch.w2");
        zero(&mut s, &p, "ch.b2");
        let g = Tensor4::full(Shape::new(1, 16, 1, 1), 3.0);
        assert!(channel_weights(&g, &s, &p).unwrap().data().iter().all(|&v| v == 0.5));

        let (mut s, p) = setup(16);
        zero(&mut s, &p, "ch.b1");
        zero(&mut s, &p, "ch.b2");
        let g = Tensor4::zeros(Shape::new(1, 16, 1, 1));
        assert!(channel_weights(&g, &s, &p).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_spatial_kernel_gives_half() {
        let (mut s, p) = setup(16);
        zero(&mut s, &p, "sp.k");
        zero(&mut s, &p, "sp.b");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::randn(Shape::new(1, 16, 6, 6), &mut rng);
        let m = spatial_mask(&x, &s, &p).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 1, 6, 6));
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn closed_gates_fall_back_to_residual() {
        let (mut s, p) = setup(16);
        fill(&mut s, &p, "ch.b2", -40.0);
        fill(&mut s, &p, "sp.b", -40.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::randn(Shape::new(1, 16, 8, 8), &mut rng);
        let y = dual_attention_forward(&x, &s, &p).unwrap();
        assert!(y.sub(&x).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn zero_input_zero_output() {
        let (mut s, p) = setup(16);
        zero(&mut s, &p, "init.pw.b");
        let x = Tensor4::zeros(Shape::new(1, 16, 4, 4));
        let y = dual_attention_forward(&x, &s, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

//! The fusion operator `Phi`.
//!
//! For a target level `t` and current state `f` (at `t`'s resolution):
//!
//! 1. Every pyramid level is resampled to the target resolution; the state `f`
//!    takes the place of level `t` itself.
//! 2. The neighbour stack `[coarser; self; finer]` (a missing neighbour repeats
//!    the target) goes through a 1x1 conv with one logit per level, and a
//!    softmax across the level axis gives per-site weights `w_l`.
//! 3. `fused = sum_l w_l * level_l`.
//! 4. `Phi(f) = dw2(silu(dw1(fused)))` with two 3x3 depthwise convolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{FixedPointOperator, Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::ops::{Resample, SoftmaxAxis};
use crate::tensor::{Shape, Tensor4};

/// Pyramid depth; levels are indexed finest (0, stride 8) to coarsest (2, stride 32).
pub const LEVELS: usize = 3;

/// Parameter names of one fusion operator, all under a common prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionParams {
    pub prefix: String,
    pub channels: usize,
}

/// Tape handles for the six fusion tensors.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub weight_w: Var,
    pub weight_b: Var,
    pub refine1_k: Var,
    pub refine1_b: Var,
    pub refine2_k: Var,
    pub refine2_b: Var,
}

impl FusionVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            weight_w: v[0],
            weight_b: v[1],
            refine1_k: v[2],
            refine1_b: v[3],
            refine2_k: v[4],
            refine2_b: v[5],
        }
    }
}

impl FusionParams {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn name(&self, tensor: &str) -> String {
        format!("{}.{tensor}", self.prefix)
    }

    /// Tensor names in the order [`FusionVars`] expects.
    pub fn names(&self) -> [String; 6] {
        [
            self.name("weight.w"),
            self.name("weight.b"),
            self.name("refine1.k"),
            self.name("refine1.b"),
            self.name("refine2.k"),
            self.name("refine2.b"),
        ]
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        let [ww, wb, r1k, r1b, r2k, r2b] = self.names();
        store.init_uniform(&ww, Shape::new(LEVELS, 3 * c, 1, 1), 3 * c)?;
        store.init_uniform(&wb, Shape::new(LEVELS, 1, 1, 1), 3 * c)?;
        store.init_uniform(&r1k, Shape::new(c, 1, 3, 3), 9)?;
        store.init_uniform(&r1b, Shape::new(c, 1, 1, 1), 9)?;
        store.init_uniform(&r2k, Shape::new(c, 1, 3, 3), 9)?;
        store.init_uniform(&r2b, Shape::new(c, 1, 1, 1), 9)?;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<FusionVars> {
        let vars = self
            .names()
            .iter()
            .map(|n| tape.param(store, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionVars::from_slice(&vars))
    }

    pub fn count(&self) -> usize {
        let c = self.channels;
        LEVELS * 3 * c + LEVELS + 2 * (9 * c + c)
    }
}

/// Resamples `x` from level `from` to the resolution of level `to`.
pub fn align(tape: &mut Tape, x: Var, from: usize, to: usize) -> Result<Var> {
    let mut v = x;
    if from > to {
        for _ in to..from {
            v = tape.resample(v, Resample::Up2)?;
        }
    } else {
        for _ in from..to {
            v = tape.resample(v, Resample::Down2)?;
        }
    }
    Ok(v)
}

/// Softmax level weights `(n, L, h, w)` for `target` from a stack already
/// aligned to one resolution (finest level first).
pub fn fusion_weights(
    tape: &mut Tape,
    aligned: &[Var],
    target: usize,
    weight_w: Var,
    weight_b: Var,
) -> Result<Var> {
    if aligned.len() != LEVELS {
        return Err(shape_err(format!(
            "fusion_weights expects {LEVELS} levels, got {}",
            aligned.len()
        )));
    }
    if target >= LEVELS {
        return Err(shape_err(format!("target level {target} out of range")));
    }
    let coarser = aligned[(target + 1).min(LEVELS - 1)];
    let finer = aligned[target.saturating_sub(1)];
    let stack = tape.concat(&[coarser, aligned[target], finer])?;
    let logits = tape.conv1x1(stack, weight_w, Some(weight_b))?;
    tape.softmax(logits, SoftmaxAxis::Channel)
}

/// Records `Phi(f)` for `target`; `levels` are at their native resolutions.
pub fn record_phi(
    tape: &mut Tape,
    f: Var,
    levels: &[Var],
    target: usize,
    p: &FusionVars,
) -> Result<Var> {
    if levels.len() != LEVELS {
        return Err(shape_err(format!(
            "phi expects {LEVELS} levels, got {}",
            levels.len()
        )));
    }
    let fs = tape.shape(f);
    let ts = tape.shape(levels[target]);
    if fs != ts {
        return Err(shape_err(format!(
            "state {fs} does not match target level {target} of shape {ts}"
        )));
    }
    let mut aligned = Vec::with_capacity(LEVELS);
    for (l, &lv) in levels.iter().enumerate() {
        aligned.push(if l == target { f } else { align(tape, lv, l, target)? });
    }
    for (l, &a) in aligned.iter().enumerate() {
        if tape.shape(a) != fs {
            return Err(shape_err(format!(
                "level {l} aligns to {}, expected {fs}",
                tape.shape(a)
            )));
        }
    }
    let w = fusion_weights(tape, &aligned, target, p.weight_w, p.weight_b)?;
    let mut fused = None;
    for (l, &a) in aligned.iter().enumerate() {
        let wl = tape.slice_channels(w, l, 1)?;
        let term = tape.mul(wl, a)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let fused = fused.expect("LEVELS > 0");
    let h = tape.depthwise(fused, p.refine1_k, Some(p.refine1_b))?;
    let h = tape.silu(h)?;
    tape.depthwise(h, p.refine2_k, Some(p.refine2_b))
}

/// `Phi` for one target level as a [`FixedPointOperator`].
///
/// Inputs are the three levels (finest first) followed by the six fusion
/// tensors in [`FusionParams::names`] order.
#[derive(Clone, Debug)]
pub struct FusionOperator {
    pub target: usize,
}

impl FusionOperator {
    pub const INPUTS: usize = LEVELS + 6;

    pub fn new(target: usize) -> Self {
        Self { target }
    }

    /// Input tensors for [`FixedPointOperator::apply`].
    pub fn inputs(levels: &[Tensor4], params: &FusionParams, store: &ParamStore) -> Result<Vec<Tensor4>> {
        let mut out: Vec<Tensor4> = levels.to_vec();
        for n in params.names() {
            out.push(store.get(&n)?.clone());
        }
        Ok(out)
    }
}

impl FixedPointOperator for FusionOperator {
    fn record(&self, tape: &mut Tape, state: Var, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != Self::INPUTS {
            return Err(shape_err(format!(
                "fusion operator expects {} inputs, got {}",
                Self::INPUTS,
                inputs.len()
            )));
        }
        let p = FusionVars::from_slice(&inputs[LEVELS..]);
        record_phi(tape, state, &inputs[..LEVELS], self.target, &p)
    }
}

/// Largest singular value of `J_Phi` at `f`, by power iteration on `J^T J`.
///
/// `J v` comes from central differences of `Phi`, `J^T w` from the tape.
pub fn estimate_lipschitz(
    op: &dyn FixedPointOperator,
    inputs: &[Tensor4],
    f: &Tensor4,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(f.clone());
    let ins: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op.record(&mut tape, s, &ins)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Tensor4::randn(f.shape(), &mut rng);
    v = v.scale(1.0 / v.norm());
    let eps = 1e-5;
    let mut sigma_sq = 0.0;
    for _ in 0..iters {
        let plus = op.apply(&f.axpy(eps, &v)?, inputs)?;
        let minus = op.apply(&f.axpy(-eps, &v)?, inputs)?;
        let jv = plus.sub(&minus)?.scale(1.0 / (2.0 * eps));
        let jtjv = tape.grads(&[(out, jv)])?.get_or_zeros(&tape, s);
        sigma_sq = jtjv.norm();
        if sigma_sq == 0.0 {
            return Ok(0.0);
        }
        v = jtjv.scale(1.0 / sigma_sq);
    }
    Ok(sigma_sq.sqrt())
}

/// Rescales both refinement kernels until the local Lipschitz estimate of
/// `Phi` at `f0` is within 1% of `target_lipschitz` (or at most a few rounds).
/// Returns the final estimate.
pub fn calibrate_contraction(
    store: &mut ParamStore,
    params: &FusionParams,
    levels: &[Tensor4],
    target: usize,
    target_lipschitz: f64,
    power_iters: usize,
) -> Result<f64> {
    let op = FusionOperator::new(target);
    let f0 = levels[target].clone();
    let [_, _, r1k, _, r2k, _] = params.names();
    let mut est = 0.0;
    for round in 0..8 {
        let inputs = FusionOperator::inputs(levels, params, store)?;
        est = estimate_lipschitz(&op, &inputs, &f0, power_iters, store.seed() ^ round)?;
        if est == 0.0 || (est / target_lipschitz - 1.0).abs() < 0.01 {
            break;
        }
        // the refinement is roughly bilinear in the two kernel sets
        let s = (target_lipschitz / est).sqrt();
        for name in [&r1k, &r2k] {
            let scaled = store.get(name)?.scale(s);
            store.set(name, scaled)?;
        }
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel(c: usize) -> Tensor4 {
        let mut k = Tensor4::zeros(Shape::new(c, 1, 3, 3));
        for ch in 0..c {
            k.set(ch, 0, 1, 1, 1.0);
        }
        k
    }

    fn levels(c: usize, f: impl Fn(usize) -> f64) -> Vec<Tensor4> {
        (0..LEVELS)
            .map(|l| Tensor4::full(Shape::new(1, c, 8 >> l, 8 >> l), f(l)))
            .collect()
    }

    fn simple_store(c: usize) -> (ParamStore, FusionParams) {
        let p = FusionParams::new("fuse.t", c);
        let mut s = ParamStore::new(9);
        p.register(&mut s).unwrap();
        let [ww, wb, r1k, r1b, r2k, r2b] = p.names();
        s.set(&ww, Tensor4::zeros(Shape::new(3, 3 * c, 1, 1))).unwrap();
        s.set(&wb, Tensor4::zeros(Shape::new(3, 1, 1, 1))).unwrap();
        s.set(&r1k, identity_kernel(c)).unwrap();
        s.set(&r2k, identity_kernel(c)).unwrap();
        s.set(&r1b, Tensor4::zeros(Shape::new(c, 1, 1, 1))).unwrap();
        s.set(&r2b, Tensor4::zeros(Shape::new(c, 1, 1, 1))).unwrap();
        (s, p)
    }

    #[test]
    fn zero_weight_conv_gives_uniform_weights() {
        let (s, p) = simple_store(2);
        let lv = levels(2, |l| l as f64 + 0.3);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &s).unwrap();
        let ls: Vec<Var> = lv.iter().map(|t| tape.constant(t.clone())).collect();
        let aligned: Vec<Var> = (0..LEVELS).map(|l| align(&mut tape, ls[l], l, 1).unwrap()).collect();
        let w = fusion_weights(&mut tape, &aligned, 1, vars.weight_w, vars.weight_b).unwrap();
        assert_eq!(tape.shape(w), Shape::new(1, 3, 4, 4));
        assert!(tape.value(w).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rejects_wrong_level_count() {
        let (s, p) = simple_store(2);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &s).unwrap();
        let a = tape.constant(Tensor4::zeros(Shape::new(1, 2, 4, 4)));
        assert!(fusion_weights(&mut tape, &[a, a], 0, vars.weight_w, vars.weight_b).is_err());
    }

    #[test]
    fn constant_levels_stay_constant() {
        // delta kernels make both depthwise layers the identity; the silu between them remains
        let (s, p) = simple_store(2);
        let v = 0.7;
        let lv = levels(2, |_| v);
        for target in 0..LEVELS {
            let inputs = FusionOperator::inputs(&lv, &p, &s).unwrap();
            let out = FusionOperator::new(target).apply(&lv[target], &inputs).unwrap();
            let expect = crate::tensor::ops::silu(v);
            assert!(out.data().iter().all(|&x| (x - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_everything_maps_to_zero() {
        let (mut s, p) = simple_store(2);
        let [_, _, r1k, _, r2k, _] = p.names();
        s.set(&r1k, Tensor4::zeros(Shape::new(2, 1, 3, 3))).unwrap();
        s.set(&r2k, Tensor4::zeros(Shape::new(2, 1, 3, 3))).unwrap();
        let lv = levels(2, |_| 0.0);
        let inputs = FusionOperator::inputs(&lv, &p, &s).unwrap();
        let out = FusionOperator::new(0).apply(&lv[0], &inputs).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn state_shape_is_checked() {
        let (s, p) = simple_store(2);
        let lv = levels(2, |_| 1.0);
        let inputs = FusionOperator::inputs(&lv, &p, &s).unwrap();
        assert!(FusionOperator::new(0).apply(&lv[1], &inputs).is_err());
    }
}

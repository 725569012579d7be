//! Forward kernels for the primitive set.
//!
//! Every kernel is a pure function. Reductions run in a fixed order per
//! output element, so splitting the outer loops across threads does not
//! change a single bit of the result.

use rayon::prelude::*;

use super::{Shape, Tensor4};
use crate::error::{shape_err, Result};

/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Sigmoid,
    Silu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SoftmaxAxis {
    /// Across `c` at every `(n, i, j)`.
    Channel,
    /// Across all `(i, j)` of every `(n, c)` plane.
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Resample {
    /// Nearest-neighbour 2x: every pixel becomes a 2x2 block.
    Up2,
    /// 2x2 mean pooling with stride 2.
    Down2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(t: f64) -> f64 {
    t * sigmoid(t)
}

impl Activation {
    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(t),
            Activation::Silu => silu(t),
            Activation::Relu => t.max(0.0),
        }
    }

    /// Derivative at pre-activation `t`.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(t);
                s * (1.0 + t * (1.0 - s))
            }
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn par_planes(out: &mut [f64], plane: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, chunk)| f(idx, chunk));
    } else {
        out.chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, chunk)| f(idx, chunk));
    }
}

/// Checks a `(c_out, c_in, 1, 1)` weight and optional `(c_out, 1, 1, 1)` bias.
pub(crate) fn check_conv1x1(x: Shape, w: Shape, b: Option<Shape>) -> Result<Shape> {
    if w.h != 1 || w.w != 1 || w.c != x.c {
        return Err(shape_err(format!(
            "conv1x1: weight {w} incompatible with input {x}; expected ({{c_out}},{},1,1)",
            x.c
        )));
    }
    if let Some(b) = b {
        if b != Shape::new(w.n, 1, 1, 1) {
            return Err(shape_err(format!(
                "conv1x1: bias {b} must be ({},1,1,1)",
                w.n
            )));
        }
    }
    Ok(x.with_c(w.n))
}

/// `out[n,o,i,j] = bias[o] + sum_k weights[o,k] * x[n,k,i,j]`.
pub fn conv1x1(x: &Tensor4, weights: &Tensor4, bias: Option<&Tensor4>) -> Result<Tensor4> {
    let xs = x.shape();
    let out_shape = check_conv1x1(xs, weights.shape(), bias.map(|b| b.shape()))?;
    let (c_in, c_out, plane) = (xs.c, out_shape.c, xs.plane());
    let (xd, wd) = (x.data(), weights.data());
    let mut out = vec![0.0; out_shape.numel()];
    par_planes(&mut out, plane, out_shape.numel() * c_in, |idx, dst| {
        let (n, o) = (idx / c_out, idx % c_out);
        let b = bias.map_or(0.0, |b| b.data()[o]);
        dst.fill(b);
        for k in 0..c_in {
            let wk = wd[o * c_in + k];
            let src = &xd[(n * c_in + k) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    });
    Tensor4::new(out_shape, out)
}

pub(crate) fn check_depthwise(x: Shape, k: Shape, b: Option<Shape>) -> Result<usize> {
    if k.n != x.c || k.c != 1 || k.h != k.w {
        return Err(shape_err(format!(
            "depthwise_conv: kernels {k} must be ({},1,k,k) for input {x}",
            x.c
        )));
    }
    if k.h.is_multiple_of(2) {
        return Err(shape_err(format!(
            "depthwise_conv: kernel size {} must be odd",
            k.h
        )));
    }
    if let Some(b) = b {
        if b != Shape::new(x.c, 1, 1, 1) {
            return Err(shape_err(format!(
                "depthwise_conv: bias {b} must be ({},1,1,1)",
                x.c
            )));
        }
    }
    Ok(k.h)
}

/// Per-channel `k x k` correlation with zero padding `(k-1)/2`.
pub fn depthwise_conv(x: &Tensor4, kernels: &Tensor4, bias: Option<&Tensor4>) -> Result<Tensor4> {
    let xs = x.shape();
    let ks = check_depthwise(xs, kernels.shape(), bias.map(|b| b.shape()))?;
    let pad = (ks / 2) as isize;
    let (h, w, c) = (xs.h as isize, xs.w as isize, xs.c);
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![0.0; xs.numel()];
    par_planes(&mut out, xs.plane(), xs.numel() * ks * ks, |idx, dst| {
        let ch = idx % c;
        let src = &xd[idx * xs.plane()..][..xs.plane()];
        let kern = &kd[ch * ks * ks..][..ks * ks];
        let b = bias.map_or(0.0, |b| b.data()[ch]);
        for i in 0..h {
            for j in 0..w {
                let mut acc = b;
                for a in 0..ks as isize {
                    let y = i + a - pad;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for bb in 0..ks as isize {
                        let xx = j + bb - pad;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        acc += kern[(a * ks as isize + bb) as usize] * src[(y * w + xx) as usize];
                    }
                }
                dst[(i * w + j) as usize] = acc;
            }
        }
    });
    Tensor4::new(xs, out)
}

/// Mean or max across channels. For `Max` the second value holds the
/// first maximal channel index per output pixel.
pub fn channel_pool(x: &Tensor4, mode: PoolMode) -> (Tensor4, Option<Vec<usize>>) {
    let s = x.shape();
    let plane = s.plane();
    let out_shape = s.with_c(1);
    let mut out = vec![0.0; out_shape.numel()];
    let mut arg = matches!(mode, PoolMode::Max).then(|| vec![0usize; out_shape.numel()]);
    let xd = x.data();
    for n in 0..s.n {
        for p in 0..plane {
            let o = n * plane + p;
            match mode {
                PoolMode::Avg => {
                    let mut acc = 0.0;
                    for c in 0..s.c {
                        acc += xd[(n * s.c + c) * plane + p];
                    }
                    out[o] = acc / s.c as f64;
                }
                PoolMode::Max => {
                    let (mut best, mut best_c) = (xd[n * s.c * plane + p], 0);
                    for c in 1..s.c {
                        let v = xd[(n * s.c + c) * plane + p];
                        if v > best {
                            best = v;
                            best_c = c;
                        }
                    }
                    out[o] = best;
                    arg.as_mut().unwrap()[o] = best_c;
                }
            }
        }
    }
    (Tensor4::new(out_shape, out).unwrap(), arg)
}

/// Spatial mean of every channel, shape `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let plane = s.plane();
    let data = x
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor4::new(Shape::new(s.n, s.c, 1, 1), data).unwrap()
}

pub fn activation(x: &Tensor4, kind: Activation) -> Tensor4 {
    x.map(|t| kind.apply(t))
}

/// Visits every softmax slice as a list of flat indices.
pub(crate) fn for_each_slice(s: Shape, axis: SoftmaxAxis, mut f: impl FnMut(&[usize])) {
    let plane = s.plane();
    let mut idx = Vec::new();
    match axis {
        SoftmaxAxis::Channel => {
            for n in 0..s.n {
                for p in 0..plane {
                    idx.clear();
                    idx.extend((0..s.c).map(|c| (n * s.c + c) * plane + p));
                    f(&idx);
                }
            }
        }
        SoftmaxAxis::Spatial => {
            for nc in 0..s.n * s.c {
                idx.clear();
                idx.extend(nc * plane..(nc + 1) * plane);
                f(&idx);
            }
        }
    }
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor4, axis: SoftmaxAxis) -> Tensor4 {
    let s = x.shape();
    let xd = x.data();
    let mut out = vec![0.0; s.numel()];
    for_each_slice(s, axis, |idx| {
        let m = idx.iter().fold(f64::NEG_INFINITY, |m, &i| m.max(xd[i]));
        let mut z = 0.0;
        for &i in idx {
            let e = (xd[i] - m).exp();
            out[i] = e;
            z += e;
        }
        for &i in idx {
            out[i] /= z;
        }
    });
    Tensor4::new(s, out).unwrap()
}

pub fn resample(x: &Tensor4, mode: Resample) -> Result<Tensor4> {
    let s = x.shape();
    match mode {
        Resample::Up2 => {
            let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
            Ok(Tensor4::from_fn(os, |n, c, i, j| x.at(n, c, i / 2, j / 2)))
        }
        Resample::Down2 => {
            if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
                return Err(shape_err(format!(
                    "down2 needs even spatial dims, got {s}"
                )));
            }
            let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
            Ok(Tensor4::from_fn(os, |n, c, i, j| {
                let (y, xx) = (2 * i, 2 * j);
                (x.at(n, c, y, xx) + x.at(n, c, y, xx + 1) + x.at(n, c, y + 1, xx)
                    + x.at(n, c, y + 1, xx + 1))
                    * 0.25
            }))
        }
    }
}

pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4> {
    let first = xs
        .first()
        .ok_or_else(|| shape_err("concat_channels: empty input list"))?
        .shape();
    let mut c_total = 0;
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err(format!(
                "concat_channels: {s} does not match batch/spatial dims of {first}"
            )));
        }
        c_total += s.c;
    }
    let os = first.with_c(c_total);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for t in xs {
            let per_batch = t.shape().c * first.plane();
            out.extend_from_slice(&t.data()[n * per_batch..][..per_batch]);
        }
    }
    Tensor4::new(os, out)
}

/// Channels `start..start+len`.
pub fn slice_channels(x: &Tensor4, start: usize, len: usize) -> Result<Tensor4> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(shape_err(format!(
            "slice_channels: range {start}..{} out of bounds for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let os = s.with_c(len);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        out.extend_from_slice(&x.data()[(n * s.c + start) * plane..][..len * plane]);
    }
    Tensor4::new(os, out)
}

/// Result shape of broadcasting `a` against `b`; a dim broadcasts only if it is 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0usize; 4];
    for (k, (da, db)) in a.dims().into_iter().zip(b.dims()).enumerate() {
        out[k] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(shape_err(format!("cannot broadcast {a} with {b}")));
        };
    }
    Ok(Shape::new(out[0], out[1], out[2], out[3]))
}

/// Flat index into `src` for output coordinate `(n,c,i,j)` under broadcasting.
#[inline]
pub(crate) fn bcast_index(src: Shape, n: usize, c: usize, i: usize, j: usize) -> usize {
    src.index(
        if src.n == 1 { 0 } else { n },
        if src.c == 1 { 0 } else { c },
        if src.h == 1 { 0 } else { i },
        if src.w == 1 { 0 } else { j },
    )
}

pub fn elementwise(x: &Tensor4, y: &Tensor4, op: EwOp) -> Result<Tensor4> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs == ys {
        return x.zip_map(y, |a, b| apply_ew(op, a, b));
    }
    let os = broadcast_shape(xs, ys)?;
    let (xd, yd) = (x.data(), y.data());
    Ok(Tensor4::from_fn(os, |n, c, i, j| {
        apply_ew(
            op,
            xd[bcast_index(xs, n, c, i, j)],
            yd[bcast_index(ys, n, c, i, j)],
        )
    }))
}

#[inline]
fn apply_ew(op: EwOp, a: f64, b: f64) -> f64 {
    match op {
        EwOp::Add => a + b,
        EwOp::Sub => a - b,
        EwOp::Mul => a * b,
    }
}

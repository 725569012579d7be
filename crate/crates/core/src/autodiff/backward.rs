//! Backward rules, one per primitive.

use super::tape::{Op, Tape, Var};
use crate::equilibrium;
use crate::error::Result;
use crate::tensor::ops::{bcast_index, for_each_slice, EwOp, PoolMode, Resample};
use crate::tensor::{Shape, Tensor4};

/// Cotangents for the inputs of node `idx` given its output cotangent `g`.
pub(super) fn propagate(tape: &Tape, idx: usize, g: &Tensor4) -> Result<Vec<(Var, Tensor4)>> {
    let node = &tape.nodes[idx];
    let val = |v: Var| tape.value(v);
    Ok(match &node.op {
        Op::Leaf(_) => Vec::new(),
        Op::Conv1x1 { x, w, b } => {
            let (gx, gw, gb) = conv1x1_backward(val(*x), val(*w), g);
            let mut out = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                out.push((*b, gb));
            }
            out
        }
        Op::Depthwise { x, k, b } => {
            let (gx, gk, gb) = depthwise_backward(val(*x), val(*k), g);
            let mut out = vec![(*x, gx), (*k, gk)];
            if let Some(b) = b {
                out.push((*b, gb));
            }
            out
        }
        Op::ChannelPool { x, mode, argmax } => {
            vec![(*x, channel_pool_backward(val(*x).shape(), *mode, argmax.as_deref(), g))]
        }
        Op::GlobalAvgPool { x } => {
            let s = val(*x).shape();
            let inv = 1.0 / s.plane() as f64;
            let gx = Tensor4::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) * inv);
            vec![(*x, gx)]
        }
        Op::Activation { x, kind } => {
            let gx = val(*x).zip_map(g, |t, gi| gi * kind.derivative(t))?;
            vec![(*x, gx)]
        }
        Op::Softmax { x, axis } => {
            let s = &node.value;
            let (sd, gd) = (s.data(), g.data());
            let mut gx = vec![0.0; s.numel()];
            for_each_slice(s.shape(), *axis, |slice| {
                let inner: f64 = slice.iter().map(|&i| gd[i] * sd[i]).sum();
                for &i in slice {
                    gx[i] = sd[i] * (gd[i] - inner);
                }
            });
            vec![(*x, Tensor4::new(s.shape(), gx)?)]
        }
        Op::Resample { x, mode } => {
            let s = val(*x).shape();
            let gx = match mode {
                Resample::Up2 => Tensor4::from_fn(s, |n, c, i, j| {
                    let (y, xx) = (2 * i, 2 * j);
                    g.at(n, c, y, xx) + g.at(n, c, y, xx + 1) + g.at(n, c, y + 1, xx)
                        + g.at(n, c, y + 1, xx + 1)
                }),
                Resample::Down2 => Tensor4::from_fn(s, |n, c, i, j| 0.25 * g.at(n, c, i / 2, j / 2)),
            };
            vec![(*x, gx)]
        }
        Op::Concat { xs } => {
            let mut start = 0;
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                let c = val(x).shape().c;
                out.push((x, crate::tensor::ops::slice_channels(g, start, c)?));
                start += c;
            }
            out
        }
        Op::Slice { x, start } => {
            let s = val(*x).shape();
            let gs = g.shape();
            let mut gx = Tensor4::zeros(s);
            for n in 0..s.n {
                for c in 0..gs.c {
                    let src = &g.data()[gs.index(n, c, 0, 0)..][..s.plane()];
                    let dst_at = s.index(n, start + c, 0, 0);
                    gx.data_mut()[dst_at..dst_at + s.plane()].copy_from_slice(src);
                }
            }
            vec![(*x, gx)]
        }
        Op::Elementwise { x, y, op } => {
            let (gx, gy) = elementwise_backward(val(*x), val(*y), *op, g);
            vec![(*x, gx), (*y, gy)]
        }
        Op::Scale { x, s } => vec![(*x, g.scale(*s))],
        Op::AddScalar { x } => vec![(*x, g.clone())],
        Op::Sum { x } => {
            let gv = g.data()[0];
            vec![(*x, Tensor4::full(val(*x).shape(), gv))]
        }
        Op::L2Norm { x } => {
            let xv = val(*x);
            let norm = node.value.data()[0];
            let gv = g.data()[0];
            let gx = if norm > 0.0 {
                xv.scale(gv / norm)
            } else {
                Tensor4::zeros(xv.shape())
            };
            vec![(*x, gx)]
        }
        Op::Ln { x, floor } => {
            let gx = val(*x).zip_map(g, |t, gi| if t > *floor { gi / t } else { 0.0 })?;
            vec![(*x, gx)]
        }
        Op::FixedPoint(fp) => {
            let inputs: Vec<Tensor4> = fp.inputs.iter().map(|&v| val(v).clone()).collect();
            let res = equilibrium::implicit_backward(
                fp.op.as_ref(),
                &inputs,
                &node.value,
                g,
                &fp.cfg,
            )?;
            fp.inputs.iter().copied().zip(res.input_grads).collect()
        }
    })
}

fn conv1x1_backward(x: &Tensor4, w: &Tensor4, g: &Tensor4) -> (Tensor4, Tensor4, Tensor4) {
    let (xs, gs) = (x.shape(), g.shape());
    let (c_in, c_out, plane) = (xs.c, gs.c, xs.plane());
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; xs.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; c_out];
    for n in 0..xs.n {
        for o in 0..c_out {
            let gp = &gd[(n * c_out + o) * plane..][..plane];
            gb[o] += gp.iter().sum::<f64>();
            for k in 0..c_in {
                let xp = &xd[(n * c_in + k) * plane..][..plane];
                let wk = wd[o * c_in + k];
                let dst = &mut gx[(n * c_in + k) * plane..][..plane];
                let mut acc = 0.0;
                for p in 0..plane {
                    dst[p] += wk * gp[p];
                    acc += gp[p] * xp[p];
                }
                gw[o * c_in + k] += acc;
            }
        }
    }
    (
        Tensor4::new(xs, gx).unwrap(),
        Tensor4::new(w.shape(), gw).unwrap(),
        Tensor4::new(Shape::new(c_out, 1, 1, 1), gb).unwrap(),
    )
}

fn depthwise_backward(x: &Tensor4, k: &Tensor4, g: &Tensor4) -> (Tensor4, Tensor4, Tensor4) {
    let s = x.shape();
    let ks = k.shape().h;
    let pad = (ks / 2) as isize;
    let (h, w) = (s.h as isize, s.w as isize);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut gx = vec![0.0; s.numel()];
    let mut gk = vec![0.0; k.numel()];
    let mut gb = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let kern = &kd[c * ks * ks..][..ks * ks];
            for i in 0..h {
                for j in 0..w {
                    let gij = gd[base + (i * w + j) as usize];
                    gb[c] += gij;
                    for a in 0..ks as isize {
                        let y = i + a - pad;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for b in 0..ks as isize {
                            let xx = j + b - pad;
                            if xx < 0 || xx >= w {
                                continue;
                            }
                            let src = base + (y * w + xx) as usize;
                            let kidx = (a * ks as isize + b) as usize;
                            gx[src] += kern[kidx] * gij;
                            gk[c * ks * ks + kidx] += gij * xd[src];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor4::new(s, gx).unwrap(),
        Tensor4::new(k.shape(), gk).unwrap(),
        Tensor4::new(Shape::new(s.c, 1, 1, 1), gb).unwrap(),
    )
}

fn channel_pool_backward(s: Shape, mode: PoolMode, argmax: Option<&[usize]>, g: &Tensor4) -> Tensor4 {
    let plane = s.plane();
    let mut gx = Tensor4::zeros(s);
    let gd = g.data();
    let out = gx.data_mut();
    for n in 0..s.n {
        for p in 0..plane {
            let gi = gd[n * plane + p];
            match mode {
                PoolMode::Avg => {
                    for c in 0..s.c {
                        out[(n * s.c + c) * plane + p] += gi / s.c as f64;
                    }
                }
                PoolMode::Max => {
                    let c = argmax.expect("max pool saves argmax")[n * plane + p];
                    out[(n * s.c + c) * plane + p] += gi;
                }
            }
        }
    }
    gx
}

fn elementwise_backward(x: &Tensor4, y: &Tensor4, op: EwOp, g: &Tensor4) -> (Tensor4, Tensor4) {
    let (xs, ys, os) = (x.shape(), y.shape(), g.shape());
    let mut gx = Tensor4::zeros(xs);
    let mut gy = Tensor4::zeros(ys);
    let (xd, yd, gd) = (x.data(), y.data(), g.data());
    let mut o = 0;
    for n in 0..os.n {
        for c in 0..os.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    let xi = bcast_index(xs, n, c, i, j);
                    let yi = bcast_index(ys, n, c, i, j);
                    let gi = gd[o];
                    o += 1;
                    let (dx, dy) = match op {
                        EwOp::Add => (gi, gi),
                        EwOp::Sub => (gi, -gi),
                        EwOp::Mul => (gi * yd[yi], gi * xd[xi]),
                    };
                    gx.data_mut()[xi] += dx;
                    gy.data_mut()[yi] += dy;
                }
            }
        }
    }
    (gx, gy)
}

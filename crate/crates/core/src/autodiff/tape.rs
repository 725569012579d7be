use std::sync::Arc;

use indexmap::IndexMap;

use super::backward::propagate;
use super::GradMap;
use crate::equilibrium::{self, EquilibriumResult, SolverConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::ops::{self, Activation, EwOp, PoolMode, Resample, SoftmaxAxis};
use crate::tensor::{Shape, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param(String),
    Input(String),
    Constant,
}

/// An operator `state -> Phi(state; inputs)` that can be recorded on a tape.
///
/// Recording must be a pure function of the values behind `state` and
/// `inputs`; the implicit backward pass re-records it at the fixed point.
pub trait FixedPointOperator: Send + Sync {
    fn record(&self, tape: &mut Tape, state: Var, inputs: &[Var]) -> Result<Var>;

    /// `Phi(state)` evaluated on a scratch tape.
    fn apply(&self, state: &Tensor4, inputs: &[Tensor4]) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let s = tape.constant(state.clone());
        let ins: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.record(&mut tape, s, &ins)?;
        Ok(tape.value(out).clone())
    }
}

pub(crate) struct FixedPointNode {
    pub op: Arc<dyn FixedPointOperator>,
    pub inputs: Vec<Var>,
    pub cfg: SolverConfig,
}

pub(crate) enum Op {
    Leaf(LeafKind),
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    Depthwise { x: Var, k: Var, b: Option<Var> },
    ChannelPool { x: Var, mode: PoolMode, argmax: Option<Vec<usize>> },
    GlobalAvgPool { x: Var },
    Activation { x: Var, kind: Activation },
    Softmax { x: Var, axis: SoftmaxAxis },
    Resample { x: Var, mode: Resample },
    Concat { xs: Vec<Var> },
    Slice { x: Var, start: usize },
    Elementwise { x: Var, y: Var, op: EwOp },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    L2Norm { x: Var },
    Ln { x: Var, floor: f64 },
    FixedPoint(FixedPointNode),
}

pub(crate) struct Node {
    pub op: Op,
    pub value: Tensor4,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph. Parameters are deduplicated by name.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    named: IndexMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor4, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(LeafKind::Constant),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for parameter `name` from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.named.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(Op::Leaf(LeafKind::Param(name.to_string())), value, name)?;
        self.named.insert(name.to_string(), v);
        Ok(v)
    }

    /// Named non-parameter leaf whose gradient can be requested by name.
    pub fn input(&mut self, name: &str, value: Tensor4) -> Result<Var> {
        if self.named.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let v = self.push(Op::Leaf(LeafKind::Input(name.to_string())), value, name)?;
        self.named.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    /// Kind of a leaf node; `None` for computed nodes.
    pub fn leaf_kind(&self, v: Var) -> Option<&LeafKind> {
        match &self.nodes[v.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::conv1x1(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(Op::Conv1x1 { x, w, b }, out, "conv1x1")
    }

    pub fn depthwise(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::depthwise_conv(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        self.push(Op::Depthwise { x, k, b }, out, "depthwise_conv")
    }

    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (out, argmax) = ops::channel_pool(self.value(x), mode);
        self.push(Op::ChannelPool { x, mode, argmax }, out, "channel_pool")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x));
        self.push(Op::GlobalAvgPool { x }, out, "global_avg_pool")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = ops::activation(self.value(x), kind);
        self.push(Op::Activation { x, kind }, out, "activation")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn softmax(&mut self, x: Var, axis: SoftmaxAxis) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis);
        self.push(Op::Softmax { x, axis }, out, "softmax")
    }

    pub fn resample(&mut self, x: Var, mode: Resample) -> Result<Var> {
        let out = ops::resample(self.value(x), mode)?;
        self.push(Op::Resample { x, mode }, out, "resample")
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor4> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        self.push(Op::Concat { xs: xs.to_vec() }, out, "concat_channels")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        self.push(Op::Slice { x, start }, out, "slice_channels")
    }

    pub fn ew(&mut self, x: Var, y: Var, op: EwOp) -> Result<Var> {
        let out = ops::elementwise(self.value(x), self.value(y), op)?;
        self.push(Op::Elementwise { x, y, op }, out, "elementwise")
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.ew(x, y, EwOp::Add)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.ew(x, y, EwOp::Sub)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.ew(x, y, EwOp::Mul)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scale(s);
        self.push(Op::Scale { x, s }, out, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push(Op::AddScalar { x }, out, "add_scalar")
    }

    /// Sum of all elements, shape `(1,1,1,1)`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor4::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, out, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let out = Tensor4::scalar(self.value(x).norm());
        self.push(Op::L2Norm { x }, out, "l2_norm")
    }

    /// `ln(max(x, floor))`; the floor applies inside the log only.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(Op::Ln { x, floor }, out, "ln")
    }

    /// Solves `F = Phi(F; inputs)` from `f0` with Broyden's method and records
    /// the solution as one node whose backward pass is implicit.
    pub fn fixed_point(
        &mut self,
        op: Arc<dyn FixedPointOperator>,
        inputs: &[Var],
        f0: &Tensor4,
        cfg: &SolverConfig,
    ) -> Result<(Var, EquilibriumResult)> {
        let vals: Vec<Tensor4> = inputs.iter().map(|&v| self.value(v).clone()).collect();
        let result = equilibrium::broyden_solve(|f| op.apply(f, &vals), f0, cfg)?;
        let v = self.fixed_point_solved(op, inputs, &result, cfg)?;
        Ok((v, result))
    }

    /// Records an already computed equilibrium; see [`Tape::fixed_point`].
    pub fn fixed_point_solved(
        &mut self,
        op: Arc<dyn FixedPointOperator>,
        inputs: &[Var],
        result: &EquilibriumResult,
        cfg: &SolverConfig,
    ) -> Result<Var> {
        let node = FixedPointNode {
            op,
            inputs: inputs.to_vec(),
            cfg: cfg.clone(),
        };
        self.push(Op::FixedPoint(node), result.f_star.clone(), "fixed_point")
    }

    /// Vector-Jacobian product: pulls every `(node, cotangent)` seed back to all
    /// earlier nodes.
    pub fn grads(&self, seeds: &[(Var, Tensor4)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::Shape(format!(
                    "seed for node {} has shape {}, node is {}",
                    v.0,
                    g.shape(),
                    self.shape(*v)
                )));
            }
            accumulate(&mut grads[v.0], g)?;
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in propagate(self, idx, &g)? {
                accumulate(&mut grads[input.0], &contrib)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of a scalar `loss` for each name in `wrt` (parameters or named inputs).
    pub fn backward(&self, loss: Var, wrt: &[&str]) -> Result<GradMap> {
        let vars = wrt
            .iter()
            .map(|&n| self.named(n).ok_or_else(|| Error::UnknownParam(n.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.scalar_grads(loss)?;
        let mut out = GradMap::new();
        for (name, v) in wrt.iter().zip(vars) {
            out.insert(*name, grads.get_or_zeros(self, v));
        }
        Ok(out)
    }

    /// Gradients for every parameter of `store`; parameters that never reached the
    /// tape get zero tensors.
    pub fn backward_params(&self, loss: Var, store: &ParamStore) -> Result<GradMap> {
        let grads = self.scalar_grads(loss)?;
        let mut out = GradMap::new();
        for (name, value) in store.iter() {
            let g = match self.named(name) {
                Some(v) => grads.get_or_zeros(self, v),
                None => Tensor4::zeros(value.shape()),
            };
            out.insert(name, g);
        }
        Ok(out)
    }

    fn scalar_grads(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != Shape::SCALAR {
            return Err(Error::NonScalarLoss(s.to_string()));
        }
        self.grads(&[(loss, Tensor4::scalar(1.0))])
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: &Tensor4) -> Result<()> {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
    Ok(())
}

/// Per-node cotangents from [`Tape::grads`].
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// `None` when no seed reaches `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor4 {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(tape.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store_with(name: &str, t: Tensor4) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn sum_gives_ones() {
        let s = store_with("x", Tensor4::from_fn(Shape::new(2, 3, 2, 1), |n, c, i, _| (n + c + i) as f64));
        let mut tape = Tape::new();
        let x = tape.param(&s, "x").unwrap();
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l, &["x"]).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let s = store_with("x", Tensor4::zeros(Shape::new(1, 2, 2, 2)));
        let mut tape = Tape::new();
        let x = tape.param(&s, "x").unwrap();
        let y = tape.sigmoid(x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l, &["x"]).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn loss_must_be_scalar_and_names_known() {
        let s = store_with("x", Tensor4::ones(Shape::new(1, 2, 1, 1)));
        let mut tape = Tape::new();
        let x = tape.param(&s, "x").unwrap();
        assert!(matches!(tape.backward(x, &["x"]), Err(Error::NonScalarLoss(_))));
        let l = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(l, &["nope"]), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn unused_parameters_get_zeros() {
        let mut s = store_with("x", Tensor4::ones(Shape::new(1, 2, 1, 1)));
        s.insert("unused", Tensor4::ones(Shape::new(3, 1, 1, 1))).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&s, "x").unwrap();
        let l = tape.sum(x).unwrap();
        let g = tape.backward_params(l, &s).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get("unused").unwrap(), &Tensor4::zeros(Shape::new(3, 1, 1, 1)));
    }

    #[test]
    fn fan_out_accumulates_and_params_are_shared() {
        let s = store_with("x", Tensor4::scalar(3.0));
        let mut tape = Tape::new();
        let a = tape.param(&s, "x").unwrap();
        let b = tape.param(&s, "x").unwrap();
        assert_eq!(a, b);
        // x * x + x
        let sq = tape.mul(a, b).unwrap();
        let l = tape.add(sq, a).unwrap();
        let g = tape.backward(l, &["x"]).unwrap();
        assert_eq!(g.get("x").unwrap().item().unwrap(), 7.0);
        assert_eq!(tape.backward(l, &["x"]).unwrap(), g);
    }

    #[test]
    fn inputs_are_named_leaves() {
        let mut tape = Tape::new();
        let x = tape.input("in", Tensor4::scalar(2.0)).unwrap();
        assert!(tape.input("in", Tensor4::scalar(1.0)).is_err());
        assert_eq!(tape.leaf_kind(x), Some(&LeafKind::Input("in".into())));
        let y = tape.scale(x, 4.0).unwrap();
        assert_eq!(tape.leaf_kind(y), None);
        let g = tape.backward(y, &["in"]).unwrap();
        assert_eq!(g.get("in").unwrap().item().unwrap(), 4.0);
    }
}

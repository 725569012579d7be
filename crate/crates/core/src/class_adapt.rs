//! Class-aware feature adaptation.
//!
//! Two heads share the same output contract (adapted features plus one
//! spatial distribution per class):
//!
//! * **prototype**: features are projected to `d = 256`, correlated per pixel
//!   with frozen class prototypes `p_k`, scaled by a learned `1 x d` vector and
//!   turned into spatial softmax maps `A_k`; the output is
//!   `sum_k A_k * (W_k f)` with one `c x c` matrix per class.
//! * **conv**: `x_e = pw(dw3x3(x))`, `A = softmax_spatial(conv1x1(x_e))` with
//!   `K` logit channels and `x_adapt = x_e * sum_k A_k`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kmeans::{canonicalize, kmeans};
use crate::params::ParamStore;
use crate::tensor::ops::SoftmaxAxis;
use crate::tensor::{Shape, Tensor4};

/// Prototype dimensionality.
pub const PROTO_DIM: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassAdaptMode {
    #[default]
    Prototype,
    Conv,
}

impl FromStr for ClassAdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(Self::Prototype),
            "conv" => Ok(Self::Conv),
            other => Err(Error::InvalidArgument(format!(
                "class adapt mode must be `prototype` or `conv`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ClassAdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prototype => "prototype",
            Self::Conv => "conv",
        })
    }
}

/// `K x d` prototype matrix, stored as a `(K, d, 1, 1)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes(Tensor4);

impl Prototypes {
    /// Accepts `(K, d, 1, 1)` with finite, non-zero rows.
    pub fn new(t: Tensor4) -> Result<Self> {
        let s = t.shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::Shape(format!("prototypes must be (K, d, 1, 1), got {s}")));
        }
        t.ensure_finite("prototypes")?;
        for (k, row) in t.data().chunks(s.c).enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!("prototype row {k} is zero")));
            }
        }
        Ok(Self(t))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) || d == 0 {
            return Err(Error::Shape("prototype rows must share a non-zero length".into()));
        }
        Self::new(Tensor4::new(Shape::new(rows.len(), d, 1, 1), rows.concat())?)
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape().n
    }

    pub fn dim(&self) -> usize {
        self.0.shape().c
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.0.data()[k * d..(k + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }
}

/// Per-class spatial attention, shape `(n, K, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAttentionMaps(Tensor4);

impl ClassAttentionMaps {
    /// Wraps `t` after checking every `(n, k)` map is non-negative and sums to
    /// one within `tol`.
    pub fn new(t: Tensor4, tol: f64) -> Result<Self> {
        let m = Self(t);
        let worst = m.max_sum_deviation();
        if !(worst <= tol) {
            return Err(Error::InvalidArgument(format!(
                "class attention maps are not normalized: a spatial sum is off by {worst:e}"
            )));
        }
        if m.0.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("class attention maps contain negative entries".into()));
        }
        Ok(m)
    }

    /// Wraps a softmax output without re-checking it.
    pub(crate) fn from_softmax(t: Tensor4) -> Self {
        Self(t)
    }

    /// Largest `|sum_{i,j} A[n,k,i,j] - 1|` over all maps.
    pub fn max_sum_deviation(&self) -> f64 {
        self.spatial_sums()
            .into_iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) })
    }

    pub fn spatial_sums(&self) -> Vec<f64> {
        let plane = self.0.shape().plane();
        self.0.data().chunks(plane).map(|p| p.iter().sum()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape().c
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassAdaptParams {
    pub prefix: String,
    pub channels: usize,
    pub num_classes: usize,
    pub mode: ClassAdaptMode,
}

#[derive(Clone, Debug)]
pub enum ClassAdaptVars {
    Prototype {
        proj_w: Var,
        proj_b: Var,
        proto_proj: Var,
        class_w: Vec<Var>,
    },
    Conv {
        dw_k: Var,
        dw_b: Var,
        pw_w: Var,
        pw_b: Var,
        logit_w: Var,
        logit_b: Var,
    },
}

impl ClassAdaptParams {
    pub fn new(prefix: impl Into<String>, channels: usize, num_classes: usize, mode: ClassAdaptMode) -> Result<Self> {
        if num_classes == 0 || channels == 0 {
            return Err(Error::InvalidArgument(
                "class adaptation needs at least one class and one channel".into(),
            ));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
            num_classes,
            mode,
        })
    }

    pub fn name(&self, tensor: &str) -> String {
        format!("{}.{tensor}", self.prefix)
    }

    fn layout(&self) -> Vec<(String, Shape, usize)> {
        let (c, k, d) = (self.channels, self.num_classes, PROTO_DIM);
        match self.mode {
            ClassAdaptMode::Prototype => {
                let mut v = vec![
                    ("proj.w".to_string(), Shape::new(d, c, 1, 1), c),
                    ("proj.b".to_string(), Shape::new(d, 1, 1, 1), c),
                    ("proto_proj".to_string(), Shape::new(1, d, 1, 1), d),
                ];
                v.extend((0..k).map(|i| (format!("w{i}"), Shape::new(c, c, 1, 1), c)));
                v
            }
            ClassAdaptMode::Conv => vec![
                ("enhance.dw.k".to_string(), Shape::new(c, 1, 3, 3), 9),
                ("enhance.dw.b".to_string(), Shape::new(c, 1, 1, 1), 9),
                ("enhance.pw.w".to_string(), Shape::new(c, c, 1, 1), c),
                ("enhance.pw.b".to_string(), Shape::new(c, 1, 1, 1), c),
                ("logits.w".to_string(), Shape::new(k, c, 1, 1), c),
                ("logits.b".to_string(), Shape::new(k, 1, 1, 1), c),
            ],
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (t, shape, fan_in) in self.layout() {
            store.init_uniform(&self.name(&t), shape, fan_in)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<ClassAdaptVars> {
        let mut p = |t: &str| tape.param(store, &self.name(t));
        Ok(match self.mode {
            ClassAdaptMode::Prototype => ClassAdaptVars::Prototype {
                proj_w: p("proj.w")?,
                proj_b: p("proj.b")?,
                proto_proj: p("proto_proj")?,
                class_w: (0..self.num_classes)
                    .map(|i| p(&format!("w{i}")))
                    .collect::<Result<_>>()?,
            },
            ClassAdaptMode::Conv => ClassAdaptVars::Conv {
                dw_k: p("enhance.dw.k")?,
                dw_b: p("enhance.dw.b")?,
                pw_w: p("enhance.pw.w")?,
                pw_b: p("enhance.pw.b")?,
                logit_w: p("logits.w")?,
                logit_b: p("logits.b")?,
            },
        })
    }

    /// Prototype mode: `(c + 2) d + K c^2`. Conv mode: `c^2 + 11c + K(c + 1)`.
    pub fn count(&self) -> usize {
        let (c, k, d) = (self.channels, self.num_classes, PROTO_DIM);
        match self.mode {
            ClassAdaptMode::Prototype => (c + 2) * d + k * c * c,
            ClassAdaptMode::Conv => c * c + 11 * c + k * (c + 1),
        }
    }
}

/// Per-pixel projection `proj(f)`, shape `(n, d, h, w)`.
pub fn record_projection(tape: &mut Tape, f: Var, vars: &ClassAdaptVars) -> Result<Var> {
    match vars {
        ClassAdaptVars::Prototype { proj_w, proj_b, .. } => tape.conv1x1(f, *proj_w, Some(*proj_b)),
        ClassAdaptVars::Conv { .. } => Err(Error::InvalidArgument(
            "feature projection exists only in prototype mode".into(),
        )),
    }
}

/// Spatial softmax of `u . (P proj(f))`, one map per prototype.
pub fn record_class_attention(
    tape: &mut Tape,
    f: Var,
    protos: &Prototypes,
    vars: &ClassAdaptVars,
) -> Result<Var> {
    let ClassAdaptVars::Prototype { proto_proj, .. } = vars else {
        return Err(Error::InvalidArgument("class_attention needs prototype-mode parameters".into()));
    };
    let d = tape.shape(*proto_proj).c;
    if protos.dim() != d {
        return Err(Error::Shape(format!(
            "prototype dimension {} does not match projection dimension {d}",
            protos.dim()
        )));
    }
    let proj = record_projection(tape, f, vars)?;
    let p = tape.constant(protos.tensor().clone());
    // logits[k] = sum_d u[d] p_k[d] proj[d]: a 1x1 conv with weights u * P
    let weights = tape.mul(p, *proto_proj)?;
    let logits = tape.conv1x1(proj, weights, None)?;
    tape.softmax(logits, SoftmaxAxis::Spatial)
}

/// `sum_k A_k * (W_k f)`.
pub fn record_adapt_features(tape: &mut Tape, f: Var, maps: Var, vars: &ClassAdaptVars) -> Result<Var> {
    let ClassAdaptVars::Prototype { class_w, .. } = vars else {
        return Err(Error::InvalidArgument("adapt_features needs prototype-mode parameters".into()));
    };
    let k = tape.shape(maps).c;
    if k != class_w.len() {
        return Err(Error::Shape(format!(
            "{k} attention maps for {} class projections",
            class_w.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (i, &w) in class_w.iter().enumerate() {
        let wf = tape.conv1x1(f, w, None)?;
        let a = tape.slice_channels(maps, i, 1)?;
        let term = tape.mul(a, wf)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    Ok(acc.expect("at least one class"))
}

/// Conv mode; returns `(x_adapt, maps)`.
pub fn record_class_adapt_simple(tape: &mut Tape, x: Var, vars: &ClassAdaptVars) -> Result<(Var, Var)> {
    let ClassAdaptVars::Conv {
        dw_k,
        dw_b,
        pw_w,
        pw_b,
        logit_w,
        logit_b,
    } = vars
    else {
        return Err(Error::InvalidArgument("class_adapt_simple needs conv-mode parameters".into()));
    };
    let e = tape.depthwise(x, *dw_k, Some(*dw_b))?;
    let x_e = tape.conv1x1(e, *pw_w, Some(*pw_b))?;
    let logits = tape.conv1x1(x_e, *logit_w, Some(*logit_b))?;
    let maps = tape.softmax(logits, SoftmaxAxis::Spatial)?;
    let k = tape.shape(maps).c;
    let ones = tape.constant(Tensor4::ones(Shape::new(1, k, 1, 1)));
    let total = tape.conv1x1(maps, ones, None)?;
    Ok((tape.mul(x_e, total)?, maps))
}

/// Either head; returns `(adapted, maps)`.
pub fn record_class_adapt(
    tape: &mut Tape,
    f: Var,
    protos: Option<&Prototypes>,
    vars: &ClassAdaptVars,
) -> Result<(Var, Var)> {
    match vars {
        ClassAdaptVars::Prototype { .. } => {
            let protos = protos.ok_or_else(|| {
                Error::InvalidArgument("prototype mode requires initialized prototypes".into())
            })?;
            let maps = record_class_attention(tape, f, protos, vars)?;
            Ok((record_adapt_features(tape, f, maps, vars)?, maps))
        }
        ClassAdaptVars::Conv { .. } => record_class_adapt_simple(tape, f, vars),
    }
}

pub fn class_attention(
    f: &Tensor4,
    protos: &Prototypes,
    store: &ParamStore,
    params: &ClassAdaptParams,
) -> Result<ClassAttentionMaps> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, store)?;
    let fv = tape.constant(f.clone());
    let maps = record_class_attention(&mut tape, fv, protos, &vars)?;
    Ok(ClassAttentionMaps(tape.value(maps).clone()))
}

pub fn adapt_features(
    f: &Tensor4,
    maps: &ClassAttentionMaps,
    store: &ParamStore,
    params: &ClassAdaptParams,
) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, store)?;
    let fv = tape.constant(f.clone());
    let mv = tape.constant(maps.tensor().clone());
    let out = record_adapt_features(&mut tape, fv, mv, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn class_adapt_simple(
    x: &Tensor4,
    store: &ParamStore,
    params: &ClassAdaptParams,
) -> Result<(Tensor4, ClassAttentionMaps)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, store)?;
    let xv = tape.constant(x.clone());
    let (out, maps) = record_class_adapt_simple(&mut tape, xv, &vars)?;
    Ok((tape.value(out).clone(), ClassAttentionMaps(tape.value(maps).clone())))
}

/// Per-pixel projected feature vectors of every tensor in `features`.
pub fn projected_samples(
    features: &[&Tensor4],
    store: &ParamStore,
    params: &ClassAdaptParams,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, store)?;
    let mut out = Vec::new();
    for f in features {
        let fv = tape.constant((*f).clone());
        let pv = record_projection(&mut tape, fv, &vars)?;
        let p = tape.value(pv);
        let s = p.shape();
        for n in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    out.push((0..s.c).map(|c| p.at(n, c, i, j)).collect());
                }
            }
        }
    }
    Ok(out)
}

/// k-means prototypes over `d`-dimensional samples, rows in canonical order.
pub fn kmeans_init(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<Prototypes> {
    if let Some(s) = samples.iter().find(|s| s.len() != PROTO_DIM) {
        return Err(Error::Shape(format!(
            "prototype samples must have {PROTO_DIM} components, got {}",
            s.len()
        )));
    }
    let mut rows = kmeans(samples, k, seed)?.centroids;
    canonicalize(&mut rows);
    Prototypes::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(mode: ClassAdaptMode, c: usize, k: usize) -> (ParamStore, ClassAdaptParams) {
        let p = ClassAdaptParams::new("cls", c, k, mode).unwrap();
        let mut s = ParamStore::new(11);
        p.register(&mut s).unwrap();
        (s, p)
    }

    fn protos(k: usize, seed: u64) -> Prototypes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Prototypes::new(Tensor4::randn(Shape::new(k, PROTO_DIM, 1, 1), &mut rng)).unwrap()
    }

    #[test]
    fn counts_match_store() {
        for mode in [ClassAdaptMode::Prototype, ClassAdaptMode::Conv] {
            let (s, p) = store_for(mode, 16, 3);
            assert_eq!(s.count(), p.count(), "{mode}");
        }
    }

    #[test]
    fn constant_features_give_uniform_maps() {
        let (s, p) = store_for(ClassAdaptMode::Prototype, 16, 3);
        let f = Tensor4::full(Shape::new(2, 16, 4, 5), 0.7);
        let m = class_attention(&f, &protos(3, 1), &s, &p).unwrap();
        assert_eq!(m.tensor().shape(), Shape::new(2, 3, 4, 5));
        for &v in m.tensor().data() {
            assert!((v - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prototype_dimension_mismatch() {
        let (s, p) = store_for(ClassAdaptMode::Prototype, 16, 2);
        let bad = Prototypes::from_rows(&[vec![1.0; 8], vec![2.0; 8]]).unwrap();
        let f = Tensor4::ones(Shape::new(1, 16, 2, 2));
        assert!(matches!(class_attention(&f, &bad, &s, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_projections_annihilate() {
        let (mut s, p) = store_for(ClassAdaptMode::Prototype, 16, 3);
        for i in 0..3 {
            s.set(&p.name(&format!("w{i}")), Tensor4::zeros(Shape::new(16, 16, 1, 1))).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor4::randn(Shape::new(1, 16, 3, 3), &mut rng);
        let m = class_attention(&f, &protos(3, 2), &s, &p).unwrap();
        let out = adapt_features(&f, &m, &s, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_identity_class_with_uniform_map_scales() {
        let (mut s, p) = store_for(ClassAdaptMode::Prototype, 16, 1);
        let eye = Tensor4::from_fn(Shape::new(16, 16, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        s.set(&p.name("w0"), eye).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor4::randn(Shape::new(1, 16, 4, 4), &mut rng);
        let maps = ClassAttentionMaps::new(Tensor4::full(Shape::new(1, 1, 4, 4), 1.0 / 16.0), 1e-12).unwrap();
        let out = adapt_features(&f, &maps, &s, &p).unwrap();
        let expected = f.scale(1.0 / 16.0);
        assert!(out.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn conv_mode_zero_logits_is_uniform() {
        let (mut s, p) = store_for(ClassAdaptMode::Conv, 16, 3);
        s.set(&p.name("logits.w"), Tensor4::zeros(Shape::new(3, 16, 1, 1))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor4::randn(Shape::new(1, 16, 4, 2), &mut rng);
        let (out, maps) = class_adapt_simple(&x, &s, &p).unwrap();
        assert!(maps.tensor().data().iter().all(|&v| (v - 1.0 / 8.0).abs() < 1e-15));

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &s).unwrap();
        let ClassAdaptVars::Conv { dw_k, dw_b, pw_w, pw_b, .. } = vars else { unreachable!() };
        let xv = tape.constant(x);
        let e = tape.depthwise(xv, dw_k, Some(dw_b)).unwrap();
        let x_e = tape.conv1x1(e, pw_w, Some(pw_b)).unwrap();
        let expected = tape.value(x_e).scale(3.0 / 8.0);
        assert!(out.sub(&expected).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn conv_mode_zero_input_zero_bias() {
        let (mut s, p) = store_for(ClassAdaptMode::Conv, 16, 2);
        for b in ["enhance.dw.b", "enhance.pw.b"] {
            s.set(&p.name(b), Tensor4::zeros(Shape::new(16, 1, 1, 1))).unwrap();
        }
        let (out, _) = class_adapt_simple(&Tensor4::zeros(Shape::new(1, 16, 3, 3)), &s, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maps_reject_unnormalized() {
        assert!(ClassAttentionMaps::new(Tensor4::full(Shape::new(1, 1, 2, 2), 0.3), 1e-6).is_err());
        assert!(ClassAttentionMaps::new(Tensor4::full(Shape::new(1, 1, 2, 2), 0.25), 1e-12).is_ok());
    }

    #[test]
    fn prototypes_reject_zero_rows() {
        assert!(Prototypes::from_rows(&[vec![0.0; 4]]).is_err());
        assert!(Prototypes::from_rows(&[vec![0.0, 1.0]]).is_ok());
    }
}

//! The fusion neck.
//!
//! One top-down and one bottom-up sweep over residual lateral projections:
//!
//! ```text
//! p5 = B(c5 + L5 c5)
//! p4 = B([c4 + L4 c4; up2(p5)])
//! p3 = B([c3 + L3 c3; up2(p4)])
//! p4 = B([p4; down2(p3)])
//! p5 = B([p5; down2(p4)])
//! ```
//!
//! `B` is a 1x1 conv to `c` channels followed by dual attention (or SiLU when
//! attention is switched off). With equilibrium enabled the sweep is only the
//! initializer: each level is then driven to a fixed point of its fusion
//! operator, and the solution enters the tape as one implicit node. Class
//! adaptation, if enabled, acts on the final levels with weights shared across
//! levels.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{record_dual_attention, DualAttentionParams, SQUEEZE_RATIO};
use crate::autodiff::{Tape, Var};
use crate::class_adapt::{
    kmeans_init, projected_samples, record_class_adapt, ClassAdaptMode, ClassAdaptParams, ClassAttentionMaps,
    Prototypes, PROTO_DIM,
};
use crate::equilibrium::fusion::{calibrate_contraction, record_phi, FusionVars, LEVELS};
use crate::equilibrium::{broyden_solve, EquilibriumResult, FusionOperator, FusionParams, SolverConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::ops::Resample;
use crate::tensor::{Shape, Tensor4};

pub const LEVEL_NAMES: [&str; LEVELS] = ["p3", "p4", "p5"];
/// Local Lipschitz constant the fusion operators are calibrated to.
pub const CONTRACTION_TARGET: f64 = 0.5;
const CALIBRATION_POWER_ITERS: usize = 20;

/// Backbone features at strides 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub c3: Tensor4,
    pub c4: Tensor4,
    pub c5: Tensor4,
}

impl FeaturePyramid {
    pub fn new(c3: Tensor4, c4: Tensor4, c5: Tensor4) -> Result<Self> {
        let p = Self { c3, c4, c5 };
        p.validate()?;
        Ok(p)
    }

    /// Standard-normal pyramid with `c3` of size `base_hw x base_hw`.
    pub fn random(batch: usize, channels: usize, base_hw: usize, rng: &mut impl Rng) -> Result<Self> {
        if base_hw == 0 || !base_hw.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "base_hw must be a positive multiple of 4, got {base_hw}"
            )));
        }
        let mut level = |hw: usize| Tensor4::randn(Shape::new(batch, channels, hw, hw), rng);
        let c3 = level(base_hw);
        let c4 = level(base_hw / 2);
        let c5 = level(base_hw / 4);
        Self::new(c3, c4, c5)
    }

    pub fn validate(&self) -> Result<()> {
        let [s3, s4, s5] = self.levels().map(Tensor4::shape);
        if s3.n != s4.n || s4.n != s5.n {
            return Err(Error::Shape(format!("pyramid batch sizes differ: {s3}, {s4}, {s5}")));
        }
        if s3.c != s4.c || s4.c != s5.c {
            return Err(Error::Shape(format!("pyramid channel counts differ: {s3}, {s4}, {s5}")));
        }
        for (fine, coarse) in [(s3, s4), (s4, s5)] {
            if fine.h != 2 * coarse.h || fine.w != 2 * coarse.w {
                return Err(Error::Shape(format!(
                    "pyramid level {coarse} is not half the resolution of {fine}"
                )));
            }
        }
        for t in self.levels() {
            t.ensure_finite("feature pyramid")?;
        }
        Ok(())
    }

    pub fn levels(&self) -> [&Tensor4; LEVELS] {
        [&self.c3, &self.c4, &self.c5]
    }

    pub fn shapes(&self) -> [Shape; LEVELS] {
        self.levels().map(Tensor4::shape)
    }

    fn from_vec(mut v: Vec<Tensor4>) -> Self {
        let c5 = v.pop().expect("three levels");
        let c4 = v.pop().expect("three levels");
        let c3 = v.pop().expect("three levels");
        Self { c3, c4, c5 }
    }

    /// Checksum over all levels in order.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::params::Fnv1a::new();
        for t in self.levels() {
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.levels().iter().zip(other.levels()).all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeckConfig {
    pub channels: usize,
    pub use_equilibrium: bool,
    pub use_dual_attention: bool,
    pub use_class_adapt: bool,
    /// Spatial mask convolves every channel instead of the avg/max maps.
    pub alg1_spatial: bool,
    pub solver: SolverConfig,
    pub class_adapt_mode: ClassAdaptMode,
    pub num_classes: usize,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            use_equilibrium: true,
            use_dual_attention: true,
            use_class_adapt: true,
            alg1_spatial: false,
            solver: SolverConfig::default(),
            class_adapt_mode: ClassAdaptMode::Prototype,
            num_classes: 3,
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(SQUEEZE_RATIO) {
            return Err(Error::InvalidArgument(format!(
                "neck channels must be a positive multiple of {SQUEEZE_RATIO}, got {}",
                self.channels
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
        }
        self.solver.validate()
    }

    pub fn with_switches(mut self, equilibrium: bool, dual_attention: bool, class_adapt: bool) -> Self {
        self.use_equilibrium = equilibrium;
        self.use_dual_attention = dual_attention;
        self.use_class_adapt = class_adapt;
        self
    }

    /// Closed-form parameter count.
    ///
    /// * laterals: `3 (c^2 + c)`
    /// * blocks: `(c^2 + c) + 4 (2c^2 + c)`, plus five dual attentions when enabled
    /// * fusion: three operators of `3 * 3c + 3 + 2 (9c + c)` when equilibrium is on
    /// * class adaptation: see [`ClassAdaptParams::count`]
    pub fn expected_parameter_count(&self) -> usize {
        let c = self.channels;
        let mut total = 3 * (c * c + c) + (c * c + c) + 4 * (2 * c * c + c);
        if self.use_dual_attention {
            let a = DualAttentionParams {
                prefix: String::new(),
                channels: c,
                alg1_spatial: self.alg1_spatial,
            };
            total += BLOCKS.len() * a.count();
        }
        if self.use_equilibrium {
            total += LEVELS * FusionParams::new("", c).count();
        }
        if self.use_class_adapt {
            total += self.class_adapt_params().map_or(0, |p| p.count());
        }
        total
    }

    fn class_adapt_params(&self) -> Result<ClassAdaptParams> {
        ClassAdaptParams::new("cls", self.channels, self.num_classes, self.class_adapt_mode)
    }
}

/// Block ids in execution order with their input width in units of `c`.
const BLOCKS: [(&str, usize); 5] = [("p5td", 1), ("p4td", 2), ("p3td", 2), ("p4bu", 2), ("p5bu", 2)];

/// A fusion block: 1x1 conv to `c` channels, then attention or SiLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub id: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub attention: Option<DualAttentionParams>,
}

impl BlockParams {
    pub fn new(id: &str, in_channels: usize, out_channels: usize, attention: bool, alg1_spatial: bool) -> Result<Self> {
        let attention = if attention {
            Some(DualAttentionParams::new(id, out_channels)?.with_alg1_spatial(alg1_spatial))
        } else {
            None
        };
        Ok(Self {
            id: id.to_string(),
            in_channels,
            out_channels,
            attention,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("neck.{}.w", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("neck.{}.b", self.id)
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        let (ci, co) = (self.in_channels, self.out_channels);
        store.init_uniform(&self.weight_name(), Shape::new(co, ci, 1, 1), ci)?;
        store.init_uniform(&self.bias_name(), Shape::new(co, 1, 1, 1), ci)?;
        if let Some(a) = &self.attention {
            a.register(store)?;
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let b = tape.param(store, &self.bias_name())?;
        let y = tape.conv1x1(x, w, Some(b))?;
        match &self.attention {
            Some(a) => {
                let vars = a.bind(tape, store)?;
                record_dual_attention(tape, y, &vars, a.alg1_spatial)
            }
            None => tape.silu(y),
        }
    }
}

pub fn dycaf_block(x: &Tensor4, store: &ParamStore, block: &BlockParams) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = block.record(&mut tape, store, xv)?;
    Ok(tape.value(y).clone())
}

/// How the output levels were obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum Refinement {
    SinglePass,
    /// One solver result per level, finest first.
    Equilibrium(Vec<EquilibriumResult>),
}

impl Refinement {
    pub fn results(&self) -> &[EquilibriumResult] {
        match self {
            Self::SinglePass => &[],
            Self::Equilibrium(r) => r,
        }
    }

    pub fn all_converged(&self) -> bool {
        self.results().iter().all(|r| r.converged)
    }
}

/// Handles of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct NeckVars {
    pub inputs: [Var; LEVELS],
    /// Output of the single sweep (the equilibrium initializer).
    pub pass: [Var; LEVELS],
    /// Levels after the optional equilibrium, before class adaptation.
    pub fused: [Var; LEVELS],
    pub out: [Var; LEVELS],
    pub maps: Option<[Var; LEVELS]>,
    pub refinement: Refinement,
}

#[derive(Clone, Debug)]
pub struct NeckOutput {
    pub pyramid: FeaturePyramid,
    pub refinement: Refinement,
    pub maps: Option<Vec<ClassAttentionMaps>>,
}

/// Configuration, parameters and frozen prototypes of one neck.
#[derive(Clone, Debug)]
pub struct Neck {
    cfg: NeckConfig,
    store: ParamStore,
    blocks: Vec<BlockParams>,
    fusion: Vec<FusionParams>,
    class_adapt: Option<ClassAdaptParams>,
    prototypes: Option<Prototypes>,
}

fn lateral_name(l: usize, t: &str) -> String {
    format!("neck.lat{}.{t}", l + 3)
}

impl Neck {
    /// Registers every parameter enabled by `cfg`, seeded per name.
    pub fn new(cfg: NeckConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut store = ParamStore::new(seed);
        for l in 0..LEVELS {
            store.init_uniform(&lateral_name(l, "w"), Shape::new(c, c, 1, 1), c)?;
            store.init_uniform(&lateral_name(l, "b"), Shape::new(c, 1, 1, 1), c)?;
        }
        let blocks = BLOCKS
            .iter()
            .map(|&(id, k)| BlockParams::new(id, k * c, c, cfg.use_dual_attention, cfg.alg1_spatial))
            .collect::<Result<Vec<_>>>()?;
        for b in &blocks {
            b.register(&mut store)?;
        }
        let fusion = if cfg.use_equilibrium {
            LEVEL_NAMES.iter().map(|n| FusionParams::new(format!("fuse.{n}"), c)).collect()
        } else {
            Vec::new()
        };
        for f in &fusion {
            f.register(&mut store)?;
        }
        let class_adapt = if cfg.use_class_adapt {
            let p = cfg.class_adapt_params()?;
            p.register(&mut store)?;
            Some(p)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            blocks,
            fusion,
            class_adapt,
            prototypes: None,
        })
    }

    /// [`Neck::new`], then contraction calibration and prototype
    /// initialization on `calibration` features.
    pub fn prepare(cfg: NeckConfig, seed: u64, calibration: &FeaturePyramid) -> Result<Self> {
        let mut neck = Self::new(cfg, seed)?;
        neck.calibrate(calibration)?;
        neck.init_prototypes(calibration, seed)?;
        Ok(neck)
    }

    pub fn config(&self) -> &NeckConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn fusion_params(&self) -> &[FusionParams] {
        &self.fusion
    }

    pub fn class_adapt_params(&self) -> Option<&ClassAdaptParams> {
        self.class_adapt.as_ref()
    }

    pub fn prototypes(&self) -> Option<&Prototypes> {
        self.prototypes.as_ref()
    }

    pub fn set_solver(&mut self, solver: SolverConfig) -> Result<()> {
        solver.validate()?;
        self.cfg.solver = solver;
        Ok(())
    }

    pub fn set_prototypes(&mut self, protos: Prototypes) -> Result<()> {
        if protos.num_classes() != self.cfg.num_classes || protos.dim() != PROTO_DIM {
            return Err(Error::Shape(format!(
                "expected {} x {PROTO_DIM} prototypes, got {} x {}",
                self.cfg.num_classes,
                protos.num_classes(),
                protos.dim()
            )));
        }
        self.prototypes = Some(protos);
        Ok(())
    }

    fn needs_prototypes(&self) -> bool {
        matches!(&self.class_adapt, Some(p) if p.mode == ClassAdaptMode::Prototype)
    }

    /// Scales each fusion operator's refinement kernels so that its local
    /// Lipschitz constant at the single-sweep output is about
    /// [`CONTRACTION_TARGET`]. Returns the final estimate per level.
    pub fn calibrate(&mut self, pyramid: &FeaturePyramid) -> Result<Vec<f64>> {
        if !self.cfg.use_equilibrium {
            return Ok(Vec::new());
        }
        let pass = neck_pass(pyramid, self)?;
        let levels: Vec<Tensor4> = pass.levels().into_iter().cloned().collect();
        let mut out = Vec::with_capacity(LEVELS);
        for (l, fp) in self.fusion.iter().enumerate() {
            out.push(calibrate_contraction(
                &mut self.store,
                fp,
                &levels,
                l,
                CONTRACTION_TARGET,
                CALIBRATION_POWER_ITERS,
            )?);
        }
        Ok(out)
    }

    /// k-means prototypes over the projected per-pixel features of every
    /// fused level. A no-op unless class adaptation runs in prototype mode.
    pub fn init_prototypes(&mut self, pyramid: &FeaturePyramid, seed: u64) -> Result<()> {
        if !self.needs_prototypes() {
            return Ok(());
        }
        let params = self.class_adapt.clone().expect("prototype mode");
        let mut tape = Tape::new();
        let vars = self.record_until_fused(&mut tape, &self.store, pyramid)?;
        let fused: Vec<Tensor4> = vars.fused.iter().map(|&v| tape.value(v).clone()).collect();
        let refs: Vec<&Tensor4> = fused.iter().collect();
        let samples = projected_samples(&refs, &self.store, &params)?;
        let protos = kmeans_init(&samples, self.cfg.num_classes, seed)?;
        self.set_prototypes(protos)
    }

    fn record_inputs(&self, tape: &mut Tape, pyramid: &FeaturePyramid) -> Result<[Var; LEVELS]> {
        pyramid.validate()?;
        let c = self.cfg.channels;
        if let Some(s) = pyramid.shapes().iter().find(|s| s.c != c) {
            return Err(Error::Shape(format!("pyramid level {s} does not have {c} channels")));
        }
        let mut out = [Var(0); LEVELS];
        for (l, t) in pyramid.levels().into_iter().enumerate() {
            out[l] = tape.input(&format!("input.{}", LEVEL_NAMES[l]), t.clone())?;
        }
        Ok(out)
    }

    /// Records the single sweep on already recorded inputs.
    pub fn record_pass(&self, tape: &mut Tape, store: &ParamStore, x: [Var; LEVELS]) -> Result<[Var; LEVELS]> {
        let mut lat = [Var(0); LEVELS];
        for l in 0..LEVELS {
            let w = tape.param(store, &lateral_name(l, "w"))?;
            let b = tape.param(store, &lateral_name(l, "b"))?;
            let proj = tape.conv1x1(x[l], w, Some(b))?;
            lat[l] = tape.add(x[l], proj)?;
        }
        let [b5td, b4td, b3td, b4bu, b5bu] = [0, 1, 2, 3, 4].map(|i| &self.blocks[i]);
        let p5 = b5td.record(tape, store, lat[2])?;
        let up = tape.resample(p5, Resample::Up2)?;
        let cat = tape.concat(&[lat[1], up])?;
        let p4 = b4td.record(tape, store, cat)?;
        let up = tape.resample(p4, Resample::Up2)?;
        let cat = tape.concat(&[lat[0], up])?;
        let p3 = b3td.record(tape, store, cat)?;
        let down = tape.resample(p3, Resample::Down2)?;
        let cat = tape.concat(&[p4, down])?;
        let p4 = b4bu.record(tape, store, cat)?;
        let down = tape.resample(p4, Resample::Down2)?;
        let cat = tape.concat(&[p5, down])?;
        let p5 = b5bu.record(tape, store, cat)?;
        Ok([p3, p4, p5])
    }

    fn bind_fusion(&self, tape: &mut Tape, store: &ParamStore, l: usize) -> Result<Vec<Var>> {
        self.fusion[l]
            .names()
            .iter()
            .map(|n| tape.param(store, n))
            .collect()
    }

    /// Records `Phi_l(f)` for every level at the given states; used for the
    /// equilibrium consistency loss.
    pub fn record_phi_at(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        levels: [Var; LEVELS],
        states: [Var; LEVELS],
    ) -> Result<[Var; LEVELS]> {
        if !self.cfg.use_equilibrium {
            return Err(Error::InvalidArgument("equilibrium is disabled".into()));
        }
        let mut out = [Var(0); LEVELS];
        for l in 0..LEVELS {
            let p = self.bind_fusion(tape, store, l)?;
            let vars = FusionVars {
                weight_w: p[0],
                weight_b: p[1],
                refine1_k: p[2],
                refine1_b: p[3],
                refine2_k: p[4],
                refine2_b: p[5],
            };
            out[l] = record_phi(tape, states[l], &levels, l, &vars)?;
        }
        Ok(out)
    }

    fn record_equilibrium(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pass: [Var; LEVELS],
    ) -> Result<([Var; LEVELS], Vec<EquilibriumResult>)> {
        let values: Vec<Tensor4> = pass.iter().map(|&v| tape.value(v).clone()).collect();
        let inputs = self
            .fusion
            .iter()
            .map(|fp| FusionOperator::inputs(&values, fp, store))
            .collect::<Result<Vec<_>>>()?;
        let solver = &self.cfg.solver;
        let results = (0..LEVELS)
            .into_par_iter()
            .map(|l| {
                let op = FusionOperator::new(l);
                broyden_solve(
                    |f| crate::autodiff::FixedPointOperator::apply(&op, f, &inputs[l]),
                    &values[l],
                    solver,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut fused = [Var(0); LEVELS];
        for (l, res) in results.iter().enumerate() {
            let mut ins = pass.to_vec();
            ins.extend(self.bind_fusion(tape, store, l)?);
            fused[l] = tape.fixed_point_solved(Arc::new(FusionOperator::new(l)), &ins, res, solver)?;
        }
        Ok((fused, results))
    }

    fn record_until_fused(&self, tape: &mut Tape, store: &ParamStore, pyramid: &FeaturePyramid) -> Result<NeckVars> {
        let inputs = self.record_inputs(tape, pyramid)?;
        let pass = self.record_pass(tape, store, inputs)?;
        let (fused, refinement) = if self.cfg.use_equilibrium {
            let (f, r) = self.record_equilibrium(tape, store, pass)?;
            (f, Refinement::Equilibrium(r))
        } else {
            (pass, Refinement::SinglePass)
        };
        Ok(NeckVars {
            inputs,
            pass,
            fused,
            out: fused,
            maps: None,
            refinement,
        })
    }

    /// Records the full forward pass with parameters taken from `store`.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, pyramid: &FeaturePyramid) -> Result<NeckVars> {
        let mut vars = self.record_until_fused(tape, store, pyramid)?;
        if let Some(cp) = &self.class_adapt {
            let cv = cp.bind(tape, store)?;
            let mut maps = [Var(0); LEVELS];
            for l in 0..LEVELS {
                let (out, m) = record_class_adapt(tape, vars.fused[l], self.prototypes.as_ref(), &cv)?;
                vars.out[l] = out;
                maps[l] = m;
            }
            vars.maps = Some(maps);
        }
        Ok(vars)
    }
}

pub fn neck_pass(pyramid: &FeaturePyramid, neck: &Neck) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let inputs = neck.record_inputs(&mut tape, pyramid)?;
    let pass = neck.record_pass(&mut tape, &neck.store, inputs)?;
    Ok(FeaturePyramid::from_vec(pass.iter().map(|&v| tape.value(v).clone()).collect()))
}

pub fn neck_forward(pyramid: &FeaturePyramid, neck: &Neck) -> Result<NeckOutput> {
    let mut tape = Tape::new();
    let vars = neck.record(&mut tape, &neck.store, pyramid)?;
    let maps = vars.maps.map(|m| {
        m.iter()
            .map(|&v| ClassAttentionMaps::from_softmax(tape.value(v).clone()))
            .collect()
    });
    Ok(NeckOutput {
        pyramid: FeaturePyramid::from_vec(vars.out.iter().map(|&v| tape.value(v).clone()).collect()),
        refinement: vars.refinement,
        maps,
    })
}

pub fn count_parameters(neck: &Neck) -> usize {
    neck.store.count()
}

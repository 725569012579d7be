//! `gradcheck`, `solve`, `ablate` and `bench`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;

use super::config::RunConfig;
use super::report::{AblationRow, BenchRow, GroupError, RunReport, SolverTrace};
use super::{resolve_threads, toy_pyramid, with_threads};
use crate::autodiff::finite_diff::{finite_diff_coords, DEFAULT_EPS};
use crate::autodiff::{relative_error, FixedPointOperator, Tape, Var};
use crate::equilibrium::{broyden_solve, picard_solve, FusionOperator, SolverConfig};
use crate::error::{Error, Result};
use crate::losses::{equilibrium_loss, record_equilibrium_loss, record_kl_uniform, record_mse, record_total_loss, LossWeights};
use crate::neck::{count_parameters, neck_forward, neck_pass, FeaturePyramid, Neck, NeckVars, LEVEL_NAMES};
use crate::params::{named_rng, ParamStore};
use crate::tensor::io::Dtype;
use crate::tensor::Tensor4;

/// Scalars checked by central differences in every parameter tensor.
pub const COORDS_PER_TENSOR: usize = 3;
/// Threshold when a fixed point lies on the gradient path.
pub const IMPLICIT_THRESHOLD: f64 = 1e-4;
/// Threshold for the purely explicit graph.
pub const EXPLICIT_THRESHOLD: f64 = 1e-5;
pub const GRADCHECK_BUDGET_S: f64 = 120.0;
/// Solver settings used while differentiating through the equilibrium.
pub const GRADCHECK_TOL: f64 = 1e-12;
pub const GRADCHECK_MAX_ITER: usize = 500;
pub const AGREEMENT_TOL: f64 = 1e-5;
pub const PICARD_MAX_ITER: usize = 5000;
pub const BENCH_WARMUP: usize = 5;
pub const BENCH_RUNS: usize = 30;

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// The toy objective differentiated by `gradcheck`.
pub struct GradcheckProblem {
    pub neck: Neck,
    pub pyramid: FeaturePyramid,
    /// Fixed regression target per level for the detection stand-in.
    pub targets: Vec<Tensor4>,
    pub weights: LossWeights,
}

impl GradcheckProblem {
    /// Builds the neck with the tightened solver and draws the targets.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let pyramid = toy_pyramid(cfg, cfg.base_hw)?;
        let mut neck_cfg = cfg.neck.clone();
        neck_cfg.solver = SolverConfig {
            tol: cfg.neck.solver.tol.min(GRADCHECK_TOL),
            max_iter: cfg.neck.solver.max_iter.max(GRADCHECK_MAX_ITER),
            ..cfg.neck.solver.clone()
        };
        let neck = Neck::prepare(neck_cfg, cfg.seed, &pyramid)?;
        let mut rng = named_rng(cfg.seed, "gradcheck.targets");
        let targets = pyramid.shapes().iter().map(|&s| Tensor4::randn(s, &mut rng)).collect();
        Ok(Self {
            neck,
            pyramid,
            targets,
            weights: cfg.loss,
        })
    }

    pub fn loss(&self, store: &ParamStore) -> Result<f64> {
        let (tape, loss, _) = gradcheck_loss(self, store)?;
        tape.value(loss).item()
    }
}

/// Records `lambda_det L_det + lambda_eq L_eq + lambda_ca L_ca` with
/// parameters from `store`.
///
/// `L_det` sums the per-level MSE against the fixed targets. `L_eq` is
/// evaluated at the single-sweep output, where it is a smooth function of the
/// parameters; at a converged fixed point it is zero up to the solver
/// tolerance. `L_ca` sums the KL term over the three levels.
pub fn gradcheck_loss(p: &GradcheckProblem, store: &ParamStore) -> Result<(Tape, Var, NeckVars)> {
    let mut tape = Tape::new();
    let vars = p.neck.record(&mut tape, store, &p.pyramid)?;
    let mut det = None;
    for (l, t) in p.targets.iter().enumerate() {
        let m = record_mse(&mut tape, vars.out[l], t)?;
        det = Some(match det {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let eq = if p.neck.config().use_equilibrium {
        let phi = p.neck.record_phi_at(&mut tape, store, vars.pass, vars.pass)?;
        let mut acc = None;
        for l in 0..LEVEL_NAMES.len() {
            let e = record_equilibrium_loss(&mut tape, phi[l], vars.pass[l])?;
            acc = Some(match acc {
                None => e,
                Some(a) => tape.add(a, e)?,
            });
        }
        acc
    } else {
        None
    };
    let ca = match vars.maps {
        Some(maps) => {
            let mut acc = None;
            for m in maps {
                let k = record_kl_uniform(&mut tape, m)?;
                acc = Some(match acc {
                    None => k,
                    Some(a) => tape.add(a, k)?,
                });
            }
            acc
        }
        None => None,
    };
    let total = record_total_loss(&mut tape, det, eq, ca, &p.weights)?;
    Ok((tape, total, vars))
}

/// Parameter group of a tensor name: `cls` for class adaptation, otherwise
/// the first two dotted components (`attn.p4td`, `fuse.p3`, `neck.lat5`, ...).
pub fn parameter_group(name: &str) -> String {
    if name.starts_with("cls.") {
        return "cls".to_string();
    }
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

/// Up to `per_tensor` distinct flat indices per tensor, seeded.
pub fn sample_coords(store: &ParamStore, per_tensor: usize, seed: u64) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        let mut rng = named_rng(seed, &format!("gradcheck.coords.{name}"));
        let k = per_tensor.min(t.numel());
        let mut idx: Vec<usize> = sample(&mut rng, t.numel(), k).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| (name.to_string(), i)));
    }
    out
}

pub fn gradcheck(cfg: &RunConfig) -> Result<RunReport> {
    if cfg.dtype != Dtype::F64 {
        return Err(Error::InvalidArgument("gradcheck requires dtype = f64".into()));
    }
    let start = Instant::now();
    let mut report = RunReport::new("gradcheck", cfg);
    let problem = GradcheckProblem::new(cfg)?;
    let store = problem.neck.store();
    report.parameter_count = Some(count_parameters(&problem.neck));
    report.time("setup", ms_since(start));

    let t = Instant::now();
    let (tape, loss, vars) = gradcheck_loss(&problem, store)?;
    let analytic = tape.backward_params(loss, store)?;
    report.time("backward", ms_since(t));
    for (l, r) in vars.refinement.results().iter().enumerate() {
        report.solver.push(SolverTrace {
            label: LEVEL_NAMES[l].to_string(),
            method: "broyden".into(),
            diagnostics: r.diagnostics(),
        });
    }
    if cfg.neck.use_equilibrium {
        report.check(
            "equilibrium converged",
            vars.refinement.all_converged(),
            format!(
                "tol {:e}, iterations {:?}",
                problem.neck.config().solver.tol,
                vars.refinement.results().iter().map(|r| r.iterations).collect::<Vec<_>>()
            ),
        )?;
    }

    let t = Instant::now();
    let coords = sample_coords(store, COORDS_PER_TENSOR, cfg.seed);
    let numeric = finite_diff_coords(|s| problem.loss(s), store, &coords, DEFAULT_EPS)?;
    report.time("finite_differences", ms_since(t));

    let threshold = if cfg.neck.use_equilibrium {
        IMPLICIT_THRESHOLD
    } else {
        EXPLICIT_THRESHOLD
    };
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((name, idx), fd) in coords.iter().zip(&numeric) {
        let a = analytic.get(name).expect("every parameter has a gradient").data()[*idx];
        let e = relative_error(a, *fd);
        let slot = groups.entry(parameter_group(name)).or_insert((0.0, 0));
        slot.0 = if e.is_nan() { f64::NAN } else { slot.0.max(e) };
        slot.1 += 1;
    }
    for (group, (err, n)) in &groups {
        report.gradients.push(GroupError {
            group: group.clone(),
            max_relative_error: *err,
            threshold,
            coordinates_checked: *n,
        });
        report.check(
            format!("gradient {group}"),
            *err < threshold,
            format!("max relative error {err:.3e} over {n} coordinates (< {threshold:e})"),
        )?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    report.check(
        "runtime",
        elapsed < GRADCHECK_BUDGET_S,
        format!("{elapsed:.1} s (< {GRADCHECK_BUDGET_S} s)"),
    )?;
    report.time("total", elapsed * 1e3);
    Ok(report)
}

/// Broyden against Picard on every level of the calibrated fusion instance,
/// plus the identity operator.
pub fn solve(cfg: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new("solve", cfg);
    let pyramid = toy_pyramid(cfg, cfg.base_hw)?;
    let mut neck_cfg = cfg.neck.clone();
    neck_cfg.use_equilibrium = true;
    let mut neck = Neck::new(neck_cfg, cfg.seed)?;
    neck.calibrate(&pyramid)?;
    report.parameter_count = Some(count_parameters(&neck));
    let pass = neck_pass(&pyramid, &neck)?;
    let levels: Vec<Tensor4> = pass.levels().into_iter().cloned().collect();
    let solver = &cfg.neck.solver;

    for (l, fp) in neck.fusion_params().iter().enumerate() {
        let name = LEVEL_NAMES[l];
        let op = FusionOperator::new(l);
        let inputs = FusionOperator::inputs(&levels, fp, neck.store())?;
        let phi = |f: &Tensor4| op.apply(f, &inputs);
        let t = Instant::now();
        let br = broyden_solve(phi, &levels[l], solver)?;
        report.time(&format!("broyden.{name}"), ms_since(t));
        let t = Instant::now();
        let pc = picard_solve(phi, &levels[l], solver.tol, PICARD_MAX_ITER)?;
        report.time(&format!("picard.{name}"), ms_since(t));

        if br.converged {
            let l_eq = equilibrium_loss(phi, &br.f_star)?;
            report.check(
                format!("{name} consistency"),
                l_eq <= solver.tol,
                format!("equilibrium loss {l_eq:.3e} at the solution (<= {:e})", solver.tol),
            )?;
        }
        if br.converged && pc.converged {
            let gap = br.f_star.sub(&pc.f_star)?.norm();
            report.check(
                format!("{name} agreement"),
                gap <= AGREEMENT_TOL,
                format!(
                    "||F_broyden - F_picard|| = {gap:.3e} after {} vs {} iterations",
                    br.iterations, pc.iterations
                ),
            )?;
        }
        for (method, r) in [("broyden", &br), ("picard", &pc)] {
            report.solver.push(SolverTrace {
                label: name.to_string(),
                method: method.into(),
                diagnostics: r.diagnostics(),
            });
        }
    }

    let f0 = &levels[0];
    let id = broyden_solve(|f: &Tensor4| Ok(f.clone()), f0, solver)?;
    report.check(
        "identity instance",
        id.iterations == 0 && id.residual_norm == 0.0 && id.f_star.bit_eq(f0),
        format!("{} iterations, residual {:e}", id.iterations, id.residual_norm),
    )?;
    report.solver.push(SolverTrace {
        label: "identity".into(),
        method: "broyden".into(),
        diagnostics: id.diagnostics(),
    });
    report.time("total", ms_since(start));
    Ok(report)
}

/// The eight on/off combinations of equilibrium, dual attention and class
/// adaptation, in `(eq, da, ca)` binary order.
pub fn ablation_combinations() -> Vec<(bool, bool, bool)> {
    (0..8u8).map(|b| (b & 4 != 0, b & 2 != 0, b & 1 != 0)).collect()
}

pub fn ablate(cfg: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new("ablate", cfg);
    let pyramid = toy_pyramid(cfg, cfg.base_hw)?;
    let expected: Vec<[usize; 4]> = pyramid.shapes().iter().map(|s| s.dims()).collect();
    for (eq, da, ca) in ablation_combinations() {
        let neck_cfg = cfg.neck.clone().with_switches(eq, da, ca);
        let neck = Neck::prepare(neck_cfg, cfg.seed, &pyramid)?;
        let t = Instant::now();
        let out = neck_forward(&pyramid, &neck)?;
        report.ablation.push(AblationRow {
            use_equilibrium: eq,
            use_dual_attention: da,
            use_class_adapt: ca,
            parameter_count: count_parameters(&neck),
            checksum: format!("{:016x}", out.pyramid.checksum()),
            output_shapes: out.pyramid.shapes().iter().map(|s| s.dims()).collect(),
            converged: out.refinement.all_converged(),
            elapsed_ms: ms_since(t),
        });
    }
    let rows = &report.ablation;
    let bad_shapes: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].output_shapes != expected).collect();
    let mut distinct = true;
    let mut monotone = true;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            if i < j && a.checksum == b.checksum {
                distinct = false;
            }
            // a's components are a strict subset of b's
            if i != j && (i & j) == i && a.parameter_count >= b.parameter_count {
                monotone = false;
            }
        }
    }
    let all_off = rows[0].parameter_count;
    let all_on = rows[7].parameter_count;
    let (shapes_ok, detail) = (bad_shapes.is_empty(), format!("combinations with wrong shapes: {bad_shapes:?}"));
    report.check("shape contract", shapes_ok, detail)?;
    report.check("distinct outputs", distinct, "pairwise distinct output checksums")?;
    report.check(
        "parameter monotonicity",
        monotone && all_off < all_on,
        format!("all off {all_off}, all on {all_on}"),
    )?;
    report.parameter_count = Some(all_on);
    report.time("total", ms_since(start));
    Ok(report)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // nearest rank
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn bench_row(neck: &Neck, pyramid: &FeaturePyramid, threads: usize) -> Result<BenchRow> {
    with_threads(threads, || -> Result<BenchRow> {
        let mut last = None;
        for _ in 0..BENCH_WARMUP {
            last = Some(neck_forward(pyramid, neck)?);
        }
        let mut runs = Vec::with_capacity(BENCH_RUNS);
        for _ in 0..BENCH_RUNS {
            let t = Instant::now();
            let out = neck_forward(pyramid, neck)?;
            runs.push(ms_since(t));
            last = Some(out);
        }
        let mut sorted = runs.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(BenchRow {
            base_hw: pyramid.c3.shape().h,
            threads,
            warmup_runs: BENCH_WARMUP,
            median_ms: median(&sorted),
            p95_ms: percentile(&sorted, 0.95),
            runs_ms: runs,
            checksum: format!("{:016x}", last.expect("at least one run").pyramid.checksum()),
        })
    })?
}

/// Forward-pass timings at `base_hw` and `2 base_hw`, single-threaded and
/// with at least two workers.
pub fn bench(cfg: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new("bench", cfg);
    let multi = resolve_threads(cfg.threads).max(2);
    let mut single_medians = Vec::new();
    for hw in [cfg.base_hw, 2 * cfg.base_hw] {
        let pyramid = toy_pyramid(cfg, hw)?;
        let neck = Neck::prepare(cfg.neck.clone(), cfg.seed, &pyramid)?;
        report.parameter_count = Some(count_parameters(&neck));
        let one = bench_row(&neck, &pyramid, 1)?;
        let many = bench_row(&neck, &pyramid, multi)?;
        report.check(
            format!("run count {hw}"),
            one.runs_ms.len() == BENCH_RUNS && many.runs_ms.len() == BENCH_RUNS,
            format!("{BENCH_RUNS} timed runs after {BENCH_WARMUP} warm-ups"),
        )?;
        report.check(
            format!("thread determinism {hw}"),
            one.checksum == many.checksum,
            format!("1 vs {multi} threads: {} / {}", one.checksum, many.checksum),
        )?;
        single_medians.push(one.median_ms);
        report.bench.push(one);
        report.bench.push(many);
    }
    report.check(
        "cost grows with size",
        single_medians[1] > single_medians[0],
        format!(
            "median {:.2} ms at {} vs {:.2} ms at {}",
            single_medians[0],
            cfg.base_hw,
            single_medians[1],
            2 * cfg.base_hw
        ),
    )?;
    report.time("total", ms_since(start));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups() {
        assert_eq!(parameter_group("attn.p4td.gap.w1"), "attn.p4td");
        assert_eq!(parameter_group("neck.lat3.w"), "neck.lat3");
        assert_eq!(parameter_group("fuse.p3.refine1.k"), "fuse.p3");
        assert_eq!(parameter_group("cls.w2"), "cls");
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=30).map(f64::from).collect();
        assert_eq!(median(&v), 15.5);
        assert_eq!(percentile(&v, 0.95), 29.0);
        assert_eq!(median(&[3.0]), 3.0);
    }

    #[test]
    fn combinations_cover_all_eight() {
        let c = ablation_combinations();
        assert_eq!(c.len(), 8);
        assert_eq!(c[0], (false, false, false));
        assert_eq!(c[7], (true, true, true));
    }
}

//! Broyden and Picard on a calibrated fusion operator.
//!
//! `cargo run --example fixed_point`

use dycaf::autodiff::FixedPointOperator;
use dycaf::equilibrium::{broyden_solve, picard_solve, FusionOperator};
use dycaf::neck::{neck_pass, FeaturePyramid, Neck, NeckConfig, LEVEL_NAMES};
use dycaf::params::named_rng;
use dycaf::{Result, SolverConfig, Tensor4};

fn main() -> Result<()> {
    let pyramid = FeaturePyramid::random(1, 16, 16, &mut named_rng(7, "pyramid"))?;
    let mut neck = Neck::new(NeckConfig::default(), 7)?;
    let lipschitz = neck.calibrate(&pyramid)?;
    println!("local Lipschitz estimates after calibration: {lipschitz:.3?}");

    let levels: Vec<Tensor4> = neck_pass(&pyramid, &neck)?.levels().into_iter().cloned().collect();
    let cfg = SolverConfig::default();
    for (l, fp) in neck.fusion_params().iter().enumerate() {
        let op = FusionOperator::new(l);
        let inputs = FusionOperator::inputs(&levels, fp, neck.store())?;
        let phi = |f: &Tensor4| op.apply(f, &inputs);
        let br = broyden_solve(phi, &levels[l], &cfg)?;
        let pc = picard_solve(phi, &levels[l], cfg.tol, 1000)?;
        println!(
            "{}: broyden {} iterations (residual {:.1e}), picard {} iterations, gap {:.1e}",
            LEVEL_NAMES[l],
            br.iterations,
            br.residual_norm,
            pc.iterations,
            br.f_star.sub(&pc.f_star)?.norm()
        );
        let trace: Vec<String> = br.residual_trace.iter().take(6).map(|r| format!("{r:.2e}")).collect();
        println!("    first residuals: {}", trace.join(" "));
    }
    Ok(())
}

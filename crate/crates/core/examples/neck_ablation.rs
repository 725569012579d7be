//! The full neck under all eight component switches.
//!
//! `cargo run --release --example neck_ablation`

use dycaf::harness::commands::ablation_combinations;
use dycaf::neck::{count_parameters, neck_forward, FeaturePyramid, Neck, NeckConfig, Refinement};
use dycaf::params::named_rng;
use dycaf::Result;

fn main() -> Result<()> {
    let pyramid = FeaturePyramid::random(1, 16, 16, &mut named_rng(0, "pyramid"))?;
    let shapes: Vec<String> = pyramid.shapes().iter().map(|s| s.to_string()).collect();
    println!("input shapes {}", shapes.join(" "));
    println!("eq    attn  class   params  checksum          solver");
    for (eq, da, ca) in ablation_combinations() {
        let cfg = NeckConfig::default().with_switches(eq, da, ca);
        let neck = Neck::prepare(cfg.clone(), 0, &pyramid)?;
        assert_eq!(count_parameters(&neck), cfg.expected_parameter_count());
        let out = neck_forward(&pyramid, &neck)?;
        let solver = match &out.refinement {
            Refinement::SinglePass => "single pass".to_string(),
            Refinement::Equilibrium(rs) => format!("{:?} iterations", rs.iter().map(|r| r.iterations).collect::<Vec<_>>()),
        };
        println!(
            "{eq:<5} {da:<5} {ca:<5} {:>8}  {:016x}  {solver}",
            count_parameters(&neck),
            out.pyramid.checksum()
        );
    }
    Ok(())
}

//! Driving the harness from a configuration string.
//!
//! `cargo run --release --example run_config`

use dycaf::harness::{run, Command, RunConfig};
use dycaf::Result;

const CONFIG: &str = "\
# smaller pyramid, single-pass neck
pyramid.base_hw = 8
neck.use_equilibrium = off
seed = 11
";

fn main() -> Result<()> {
    let cfg = RunConfig::parse(CONFIG)?;
    for command in [Command::Solve, Command::Ablate] {
        let report = run(command, &cfg)?;
        print!("{}", report.summary());
    }
    Ok(())
}

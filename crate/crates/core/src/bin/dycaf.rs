use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dycaf::harness::{self, Command, RunConfig};

#[derive(Parser)]
#[command(name = "dycaf", about = "Gradient, solver, ablation and timing checks for the dycaf neck")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare tape gradients with central differences on the toy problem
    Gradcheck(Args),
    /// Broyden and Picard on the seeded fusion instance
    Solve(Args),
    /// All eight on/off combinations of the three components
    Ablate(Args),
    /// Forward-pass timings
    Bench(Args),
}

#[derive(clap::Args)]
struct Args {
    /// key = value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Write the JSON report here (overrides `out` in the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Gradcheck(a) => (Command::Gradcheck, a),
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
        Cmd::Bench(a) => (Command::Bench, a),
    };
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if args.out.is_some() {
            cfg.out = args.out.clone();
        }
        let report = harness::run(command, &cfg)?;
        if let Some(path) = &cfg.out {
            report.write(path)?;
        }
        Ok(report)
    });
    match result {
        Ok(report) => {
            print!("{}", report.summary());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            ExitCode::from(2)
        }
    }
}

//! Configuration files, the four harness commands and their reports.
//!
//! Every command is deterministic given its [`RunConfig`] apart from the
//! wall-clock fields of the report.

pub mod commands;
pub mod config;
pub mod report;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::neck::FeaturePyramid;
use crate::params::named_rng;

pub use commands::{ablate, bench, gradcheck, gradcheck_loss, solve, GradcheckProblem};
pub use config::RunConfig;
pub use report::{RunReport, SCHEMA_VERSION};

/// Environment variable capping the worker count (`0` = no cap).
pub const THREADS_ENV: &str = "DYCAF_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gradcheck,
    Solve,
    Ablate,
    Bench,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Self::Gradcheck),
            "solve" => Ok(Self::Solve),
            "ablate" => Ok(Self::Ablate),
            "bench" => Ok(Self::Bench),
            _ => Err(Error::InvalidArgument(format!("unknown command `{s}`"))),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gradcheck => "gradcheck",
            Self::Solve => "solve",
            Self::Ablate => "ablate",
            Self::Bench => "bench",
        })
    }
}

/// Worker count for a requested value (`0` = all cores), capped by
/// `DYCAF_THREADS` when that is set to a positive number.
pub fn resolve_threads(requested: usize) -> usize {
    let auto = std::thread::available_parallelism().map_or(1, |n| n.get());
    let wanted = if requested == 0 { auto } else { requested };
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => wanted.min(cap),
        _ => wanted,
    }
}

/// Runs `f` on a dedicated pool of exactly `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Standard-normal pyramid drawn from the run seed.
pub fn toy_pyramid(cfg: &RunConfig, base_hw: usize) -> Result<FeaturePyramid> {
    let mut rng = named_rng(cfg.seed, "pyramid");
    FeaturePyramid::random(cfg.batch, cfg.neck.channels, base_hw, &mut rng)
}

/// Runs one command on a pool sized by [`resolve_threads`].
pub fn run(command: Command, cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    with_threads(resolve_threads(cfg.threads), || match command {
        Command::Gradcheck => gradcheck(cfg),
        Command::Solve => solve(cfg),
        Command::Ablate => ablate(cfg),
        Command::Bench => bench(cfg),
    })?
}

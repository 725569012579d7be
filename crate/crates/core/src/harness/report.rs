//! JSON run reports.
//!
//! Top-level fields of schema version 1:
//!
//! | field             | content                                                   |
//! |-------------------|-----------------------------------------------------------|
//! | `schema_version`  | `1`                                                       |
//! | `command`         | `gradcheck`, `solve`, `ablate` or `bench`                 |
//! | `config`          | echo of the effective [`RunConfig`]                       |
//! | `passed`          | `true` iff every entry of `checks` passed                 |
//! | `checks`          | `{name, passed, detail}`, names unique                    |
//! | `gradients`       | per parameter group: max relative error and threshold     |
//! | `solver`          | per solve: label, method and residual trace               |
//! | `parameter_count` | learnable scalars of the configured neck, if built        |
//! | `ablation`        | one row per on/off combination                            |
//! | `bench`           | one row per (size, thread count) with all run times       |
//! | `timings_ms`      | wall-clock phases; the only non-deterministic field       |

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::equilibrium::SolverDiagnostics;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_relative_error: f64,
    pub threshold: f64,
    pub coordinates_checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub label: String,
    pub method: String,
    #[serde(flatten)]
    pub diagnostics: SolverDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_equilibrium: bool,
    pub use_dual_attention: bool,
    pub use_class_adapt: bool,
    pub parameter_count: usize,
    /// FNV-1a over output shapes and bit patterns, hex.
    pub checksum: String,
    pub output_shapes: Vec<[usize; 4]>,
    pub converged: bool,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub base_hw: usize,
    pub threads: usize,
    pub warmup_runs: usize,
    pub runs_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub gradients: Vec<GroupError>,
    pub solver: Vec<SolverTrace>,
    pub parameter_count: Option<usize>,
    pub ablation: Vec<AblationRow>,
    pub bench: Vec<BenchRow>,
    pub timings_ms: IndexMap<String, f64>,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config: config.clone(),
            passed: true,
            checks: Vec::new(),
            gradients: Vec::new(),
            solver: Vec::new(),
            parameter_count: None,
            ablation: Vec::new(),
            bench: Vec::new(),
            timings_ms: IndexMap::new(),
        }
    }

    /// Records a check. Names must be unique within a report.
    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Result<()> {
        let name = name.into();
        if self.checks.iter().any(|c| c.name == name) {
            return Err(Error::InvalidArgument(format!("check `{name}` recorded twice")));
        }
        self.passed &= passed;
        self.checks.push(Check {
            name,
            passed,
            detail: detail.into(),
        });
        Ok(())
    }

    pub fn time(&mut self, phase: &str, ms: f64) {
        self.timings_ms.insert(phase.to_string(), ms);
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{tag} {}: {}\n", c.name, c.detail));
        }
        s.push_str(&format!(
            "{} {}\n",
            self.command,
            if self.passed { "passed" } else { "FAILED" }
        ));
        s
    }
}

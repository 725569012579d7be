//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. Every error carries its 1-based line number.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::SQUEEZE_RATIO;
use crate::class_adapt::ClassAdaptMode;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::neck::NeckConfig;
use crate::tensor::io::Dtype;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub neck: NeckConfig,
    pub loss: LossWeights,
    pub batch: usize,
    /// Spatial size of the finest level; the coarser two are halvings.
    pub base_hw: usize,
    pub seed: u64,
    pub dtype: Dtype,
    /// Worker threads, `0` = all available.
    pub threads: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    /// The toy setup: batch 1, 16x16 finest level, 16 channels, 3 classes.
    fn default() -> Self {
        Self {
            neck: NeckConfig::default(),
            loss: LossWeights::default(),
            batch: 1,
            base_hw: 16,
            seed: 0,
            dtype: Dtype::F64,
            threads: 0,
            out: None,
        }
    }
}

fn parse_value<T: FromStr>(raw: &str, line: usize, key: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse `{raw}` as the value of `{key}`"),
    })
}

fn parse_bool(raw: &str, line: usize, key: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("`{key}` expects true or false, got `{raw}`"),
        }),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(Error::Config {
                    line,
                    msg: format!("missing value for `{key}`"),
                });
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one assignment; `line` is used for error reporting only.
    pub fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let err = |msg: String| Error::Config { line, msg };
        match key {
            "neck.channels" => {
                let c: usize = parse_value(v, line, key)?;
                if c == 0 || !c.is_multiple_of(SQUEEZE_RATIO) {
                    return Err(err(format!("neck.channels must be a positive multiple of {SQUEEZE_RATIO}")));
                }
                self.neck.channels = c;
            }
            "neck.use_equilibrium" => self.neck.use_equilibrium = parse_bool(v, line, key)?,
            "neck.use_dual_attention" => self.neck.use_dual_attention = parse_bool(v, line, key)?,
            "neck.use_class_adapt" => self.neck.use_class_adapt = parse_bool(v, line, key)?,
            "neck.alg1_spatial" => self.neck.alg1_spatial = parse_bool(v, line, key)?,
            "solver.alpha" => {
                let a: f64 = parse_value(v, line, key)?;
                if !(a > 0.0 && a <= 1.0) {
                    return Err(err("solver.alpha must lie in (0, 1]".into()));
                }
                self.neck.solver.alpha = a;
            }
            "solver.tol" => {
                let t: f64 = parse_value(v, line, key)?;
                if !(t > 0.0) {
                    return Err(err("solver.tol must be > 0".into()));
                }
                self.neck.solver.tol = t;
            }
            "solver.max_iter" => {
                let m: usize = parse_value(v, line, key)?;
                if m == 0 {
                    return Err(err("solver.max_iter must be >= 1".into()));
                }
                self.neck.solver.max_iter = m;
            }
            "solver.memory" => self.neck.solver.memory = parse_value(v, line, key)?,
            "class_adapt.mode" => {
                self.neck.class_adapt_mode = ClassAdaptMode::from_str(v).map_err(|e| err(e.to_string()))?
            }
            "class_adapt.num_classes" => {
                let k: usize = parse_value(v, line, key)?;
                if k == 0 {
                    return Err(err("class_adapt.num_classes must be >= 1".into()));
                }
                self.neck.num_classes = k;
            }
            "loss.lambda_det" | "loss.lambda_eq" | "loss.lambda_ca" => {
                let x: f64 = parse_value(v, line, key)?;
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(err(format!("{key} must be finite and >= 0")));
                }
                match key {
                    "loss.lambda_det" => self.loss.lambda_det = x,
                    "loss.lambda_eq" => self.loss.lambda_eq = x,
                    _ => self.loss.lambda_ca = x,
                }
            }
            "pyramid.batch" => {
                let b: usize = parse_value(v, line, key)?;
                if b == 0 {
                    return Err(err("pyramid.batch must be >= 1".into()));
                }
                self.batch = b;
            }
            "pyramid.base_hw" => {
                let hw: usize = parse_value(v, line, key)?;
                if hw == 0 || !hw.is_multiple_of(4) {
                    return Err(err("pyramid.base_hw must be a positive multiple of 4".into()));
                }
                self.base_hw = hw;
            }
            "seed" => self.seed = parse_value(v, line, key)?,
            "dtype" => {
                self.dtype = match v {
                    "f64" => Dtype::F64,
                    "f32" => Dtype::F32,
                    _ => return Err(err(format!("dtype must be f32 or f64, got `{v}`"))),
                }
            }
            "threads" => self.threads = parse_value(v, line, key)?,
            "out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.neck.validate()?;
        self.loss.validate()?;
        if self.base_hw == 0 || !self.base_hw.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "base_hw must be a positive multiple of 4, got {}",
                self.base_hw
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be >= 1".into()));
        }
        Ok(())
    }
}

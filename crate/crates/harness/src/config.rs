//! Experiment configuration, read from TOML files or assembled from flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use skelflow::{Contract, WorkerSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

/// Kill worker `worker` (1-based recruitment order) at `at_s` seconds.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct Fault {
    pub at_s: f64,
    pub worker: u32,
}

/// Stretch worker `worker`'s execution time by `factor` from `at_s` on.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct Overload {
    pub at_s: f64,
    pub worker: u32,
    pub factor: f64,
}

/// A script file holding `[[fault]]` and `[[overload]]` tables.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub fault: Vec<Fault>,
    #[serde(default)]
    pub overload: Vec<Overload>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Script, ConfigError> {
        read_toml(path)
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Skeleton text, e.g. `farm(seq:work)`.
    #[serde(default)]
    pub program: Option<String>,
    /// Workflow description file; used instead of `program`.
    #[serde(default)]
    pub workflow: Option<PathBuf>,
    #[serde(default)]
    pub tasks: usize,
    #[serde(default)]
    pub grain_ms: f64,
    #[serde(default)]
    pub comm_ms: f64,
    /// Workers recruited at start: `local:K` or a comma list of `local` and
    /// `host:port` entries.
    #[serde(default = "default_workers")]
    pub workers: String,
    /// Extra workers the manager may recruit, same syntax as `workers`.
    #[serde(default)]
    pub spares: Option<String>,
    #[serde(default)]
    pub contract: Option<String>,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub fault: Vec<Fault>,
    #[serde(default)]
    pub overload: Vec<Overload>,
    /// Stops a run after this long even if tasks remain (bench-adapt).
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default = "default_window_s")]
    pub window_s: f64,
    #[serde(default = "default_cooldown")]
    pub cooldown_ticks: u64,
    /// Per-run limit before the run counts as an infrastructure failure.
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default)]
    pub events: Option<PathBuf>,
}

fn default_workers() -> String {
    "local:1".into()
}

fn default_tick_ms() -> u64 {
    1000
}

fn default_window_s() -> f64 {
    10.0
}

fn default_cooldown() -> u64 {
    2
}

fn default_timeout_s() -> f64 {
    3600.0
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    toml::from_str(&text).map_err(|source| ConfigError::Toml { path: path.into(), source })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.program.is_none() == self.workflow.is_none() {
            return bad("exactly one of `program` and `workflow` is required".into());
        }
        if self.grain_ms.is_nan() || self.comm_ms.is_nan() || self.grain_ms < 0.0 || self.comm_ms < 0.0 {
            return bad("grain_ms and comm_ms must be non-negative".into());
        }
        if let Some(o) = self.overload.iter().find(|o| o.factor.is_nan() || o.factor < 1.0) {
            return bad(format!("overload factor {} is below 1", o.factor));
        }
        if self.window_s <= 0.0 || self.tick_ms == 0 {
            return bad("window_s and tick_ms must be positive".into());
        }
        parse_workers(&self.workers).map_err(ConfigError::Invalid)?;
        if let Some(s) = &self.spares {
            parse_workers(s).map_err(ConfigError::Invalid)?;
        }
        if let Some(c) = &self.contract {
            c.parse::<Contract>().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn grain(&self) -> Duration {
        Duration::from_secs_f64(self.grain_ms / 1e3)
    }

    pub fn comm(&self) -> Duration {
        Duration::from_secs_f64(self.comm_ms / 1e3)
    }

    pub fn worker_specs(&self) -> Vec<WorkerSpec> {
        parse_workers(&self.workers).expect("validated")
    }

    pub fn spare_specs(&self) -> Vec<WorkerSpec> {
        self.spares.as_deref().map(|s| parse_workers(s).expect("validated")).unwrap_or_default()
    }

    pub fn contract(&self) -> Option<Contract> {
        self.contract.as_ref().map(|c| c.parse().expect("validated"))
    }

    pub fn merge_script(&mut self, script: Script) {
        self.fault.extend(script.fault);
        self.overload.extend(script.overload);
    }
}

/// `local:K`, or a comma list of `local` and `host:port`. Empty means none.
pub fn parse_workers(text: &str) -> Result<Vec<WorkerSpec>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(k) = text.strip_prefix("local:") {
        if let Ok(k) = k.trim().parse::<usize>() {
            return Ok(vec![WorkerSpec::Local; k]);
        }
    }
    text.split(',').map(|s| s.parse::<WorkerSpec>()).collect()
}

/// `1..8` (inclusive) or a comma list.
pub fn parse_counts(text: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("bad list `{text}`: expected a,b,c or lo..hi");
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

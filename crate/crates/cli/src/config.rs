//! Job configuration: a TOML document validated before any numerics run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use orbstab::systems::SystemRegistry;

use crate::error::CliError;

pub const DEFAULT_GRID: usize = 512;

/// A parameter is either a single value or a list to sweep over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Sweep(Vec<f64>),
}

impl ParamValue {
    fn values(&self) -> Vec<f64> {
        match self {
            ParamValue::Scalar(v) => vec![*v],
            ParamValue::Sweep(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    /// Diagonal of `Q`.
    pub q: Option<Vec<f64>>,
    /// Diagonal of `Rw`.
    pub rw: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainSource {
    Riccati,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub x0: Vec<f64>,
    pub horizon_periods: usize,
    #[serde(default = "default_gain")]
    pub gain: GainSource,
    /// Gain table written by `synthesize`; takes precedence over `gain`.
    pub gain_csv: Option<PathBuf>,
    pub dt_max: Option<f64>,
}

fn default_gain() -> GainSource {
    GainSource::Riccati
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub zero_exponent: Option<f64>,
    pub max_sweeps: Option<usize>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub samples_per_period: Option<usize>,
    pub growth_horizon_periods: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub system: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    pub weights: Option<WeightSpec>,
    pub simulation: Option<SimulationSpec>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

/// One point of a parameter sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

/// Parsed configuration with the raw text it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: JobConfig,
    pub hash: String,
    pub path: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let config = JobConfig::parse(&text)?;
        Ok(Self {
            config,
            hash: crate::output::sha256_hex(text.as_bytes()),
            path: path.to_path_buf(),
        })
    }

    /// Resolves a path from the config relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        self.path.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
    }
}

impl JobConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: JobConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let registry = SystemRegistry::builtin();
        if !registry.contains(&self.system) {
            return Err(CliError::config(format!("unknown system {:?}", self.system)));
        }
        if self.grid_size < 64 {
            return Err(CliError::config(format!("grid_size must be at least 64 (got {})", self.grid_size)));
        }
        for (k, v) in &self.params {
            let values = v.values();
            if values.is_empty() {
                return Err(CliError::config(format!("parameter {k:?} has an empty sweep")));
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(CliError::config(format!("parameter {k:?} must be finite")));
            }
        }
        if let Some(w) = &self.weights {
            for (name, d) in [("q", &w.q), ("rw", &w.rw)] {
                if let Some(d) = d {
                    if d.iter().any(|x| !x.is_finite() || *x < 0.0) {
                        return Err(CliError::config(format!("weights.{name} must be finite and non-negative")));
                    }
                }
            }
        }
        if let Some(sim) = &self.simulation {
            if sim.horizon_periods < 1 {
                return Err(CliError::config("simulation.horizon_periods must be at least 1"));
            }
            if sim.x0.iter().any(|x| !x.is_finite()) {
                return Err(CliError::config("simulation.x0 must be finite"));
            }
            if matches!(sim.dt_max, Some(d) if !(d > 0.0)) {
                return Err(CliError::config("simulation.dt_max must be positive"));
            }
        }
        let t = &self.tolerances;
        for (name, v) in [("zero_exponent", t.zero_exponent), ("rtol", t.rtol), ("atol", t.atol)] {
            if matches!(v, Some(x) if !(x > 0.0)) {
                return Err(CliError::config(format!("tolerances.{name} must be positive")));
            }
        }
        if t.samples_per_period == Some(0) || t.growth_horizon_periods == Some(0) || t.max_sweeps == Some(0) {
            return Err(CliError::config("integer tolerances must be positive"));
        }
        Ok(())
    }

    /// Cartesian product of the swept parameters, in key order.
    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs = vec![Job {
            name: String::new(),
            params: BTreeMap::new(),
        }];
        for (k, v) in &self.params {
            let values = v.values();
            let mut next = Vec::with_capacity(jobs.len() * values.len());
            for job in &jobs {
                for x in &values {
                    let mut params = job.params.clone();
                    params.insert(k.clone(), *x);
                    next.push(Job {
                        name: String::new(),
                        params,
                    });
                }
            }
            jobs = next;
        }
        for job in &mut jobs {
            job.name = job
                .params
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",");
        }
        jobs
    }

    pub fn is_sweep(&self) -> bool {
        self.params.values().any(|v| matches!(v, ParamValue::Sweep(_)))
    }
}

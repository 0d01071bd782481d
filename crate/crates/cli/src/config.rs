//! Flat JSON experiment configuration with per-benchmark defaults and
//! `key=value` overrides.

use std::path::Path;

use gflow_core::data::{Lorenz96Spec, MackeyGlassSpec, SurrogateSpec};
use gflow_core::model::{DelaySpec, ModelSpec};
use gflow_core::ode::{delay_steps, SolverSpec};
use gflow_core::optim::OptimizerKind;
use gflow_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Lorenz96,
    MackeyGlass,
    Tsunami,
    Surrogate,
}

impl std::str::FromStr for Benchmark {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| CliError::config(format!("unknown benchmark {s:?}")))
    }
}

/// Every knob of one experiment. Serialized as a single flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,

    pub hidden: Vec<usize>,
    /// Number of delayed inputs; lags are `lag_step, 2 lag_step, ...`.
    pub n_lags: usize,
    pub lag_step: f64,
    pub n_aug: usize,
    pub weight_norm: bool,
    pub layer_norm: bool,

    pub alpha: f64,
    pub rho: f64,
    pub lr: f64,
    pub n_max: usize,
    pub n_batch: usize,
    pub l_batch: usize,
    pub optimizer: OptimizerKind,
    pub prune_persistent: bool,

    /// Base seed; repeat `r` initializes and samples with `seed + r`.
    pub seed: u64,
    pub n_repeats: usize,

    /// Seed for data generation and splitting.
    pub data_seed: u64,
    /// Lorenz-96 series count and forcing.
    pub n_series: usize,
    pub forcing: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n_trajectories: usize,
    /// Surrogate events.
    pub n_events: usize,
    pub noise: f64,
    /// Directory of tsunami event CSVs.
    pub data_dir: Option<String>,
    /// Factor applied to stored times before training (seconds to minutes
    /// for the tsunami data).
    pub time_scale: f64,
}

impl ExperimentConfig {
    pub fn defaults(benchmark: Benchmark) -> Self {
        let base = Self {
            benchmark,
            hidden: vec![100, 100, 100],
            n_lags: 0,
            lag_step: 1.0,
            n_aug: 0,
            weight_norm: false,
            layer_norm: false,
            alpha: 0.01,
            rho: 0.01,
            lr: 0.01,
            n_max: 2000,
            n_batch: 40,
            l_batch: 100,
            optimizer: OptimizerKind::Adam,
            prune_persistent: true,
            seed: 0,
            n_repeats: 1,
            data_seed: 0,
            n_series: 6,
            forcing: 10.0,
            dt: 0.01,
            t_end: 30.72,
            n_trajectories: 16,
            n_events: 100,
            noise: 0.0,
            data_dir: None,
            time_scale: 1.0,
        };
        match benchmark {
            Benchmark::Lorenz96 => base,
            Benchmark::MackeyGlass => Self {
                hidden: vec![25, 25, 25],
                alpha: 1e-4,
                rho: 1e-4,
                n_repeats: 5,
                n_lags: 10,
                lag_step: 1.0,
                t_end: 153.6,
                n_series: 1,
                n_trajectories: 1,
                ..base
            },
            Benchmark::Tsunami => Self {
                n_lags: 6,
                lag_step: 12.0,
                weight_norm: true,
                layer_norm: true,
                lr: 0.001,
                n_max: 1000,
                l_batch: 10,
                n_series: 3,
                dt: gflow_core::data::TSUNAMI_DURATION / (gflow_core::data::TSUNAMI_POINTS - 1) as f64,
                t_end: gflow_core::data::TSUNAMI_DURATION,
                time_scale: 1.0 / 60.0,
                n_repeats: 5,
                ..base
            },
            Benchmark::Surrogate => {
                let s = SurrogateSpec::default();
                Self {
                    hidden: vec![32, 32, 32],
                    n_lags: 6,
                    lag_step: 0.4,
                    alpha: 1e-3,
                    rho: 1e-3,
                    lr: 0.001,
                    l_batch: 10,
                    n_repeats: 3,
                    n_series: 3,
                    dt: s.dt,
                    t_end: s.dt * (s.n_points - 1) as f64,
                    n_events: s.n_events,
                    ..base
                }
            }
        }
    }

    /// Builds a config from a JSON object: the `benchmark` key picks the
    /// defaults, every other key overrides one field.
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let Value::Object(obj) = v else {
            return Err(CliError::config("config must be a JSON object"));
        };
        let benchmark = match obj.get("benchmark") {
            Some(b) => serde_json::from_value(b.clone())
                .map_err(|e| CliError::config(format!("benchmark: {e}")))?,
            None => Benchmark::Lorenz96,
        };
        let mut merged = match serde_json::to_value(Self::defaults(benchmark)) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (k, val) in obj {
            merged.insert(k, val);
        }
        let cfg: Self = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(s: &str) -> Result<Self, CliError> {
        let v: Value =
            serde_json::from_str(s).map_err(|e| CliError::config(format!("config JSON: {e}")))?;
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let s = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are read as JSON when they
    /// parse, otherwise as strings, so `alpha=0.1`, `hidden=[8,8]` and
    /// `benchmark=surrogate` all work. Changing `benchmark` resets the other
    /// fields to that benchmark's defaults before the remaining overrides.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self, CliError> {
        let mut obj = match serde_json::to_value(&self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut pairs = Map::new();
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("override {s:?} is not key=value")))?;
            let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            pairs.insert(k.trim().to_string(), val);
        }
        if let Some(b) = pairs.get("benchmark") {
            let bench: Benchmark = serde_json::from_value(b.clone())
                .map_err(|e| CliError::config(format!("benchmark: {e}")))?;
            if bench != self.benchmark {
                obj = match serde_json::to_value(Self::defaults(bench)) {
                    Ok(Value::Object(m)) => m,
                    _ => unreachable!(),
                };
            }
        }
        for (k, v) in pairs {
            if !obj.contains_key(&k) {
                return Err(CliError::config(format!("unknown config key {k:?}")));
            }
            obj.insert(k, v);
        }
        Self::from_value(Value::Object(obj))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(CliError::config("hidden widths must be positive"));
        }
        if self.n_lags > 0 && !(self.lag_step > 0.0) {
            return Err(CliError::config("lag_step must be positive"));
        }
        if !(self.time_scale > 0.0) {
            return Err(CliError::config("time_scale must be positive"));
        }
        self.train_config(self.seed)
            .validate()
            .map_err(|e| CliError::config(e.to_string()))
    }

    /// Lags in training time units, snapped to the training grid. Returns the
    /// lags and whether any was moved.
    pub fn delays(&self) -> Result<(DelaySpec, bool), CliError> {
        if self.n_lags == 0 {
            return Ok((DelaySpec::none(), false));
        }
        let dt = self.dt * self.time_scale;
        let wanted: Vec<f64> = (1..=self.n_lags).map(|i| i as f64 * self.lag_step).collect();
        if let Ok(steps) = delay_steps(&wanted, dt) {
            let lags = steps.iter().map(|&s| s as f64 * dt).collect();
            return Ok((DelaySpec::new(lags).map_err(|e| CliError::config(e.to_string()))?, false));
        }
        let mut steps: Vec<usize> = Vec::with_capacity(wanted.len());
        for w in &wanted {
            let mut s = ((w / dt).round() as usize).max(1);
            if let Some(&prev) = steps.last() {
                s = s.max(prev + 1);
            }
            steps.push(s);
        }
        let lags = steps.iter().map(|&s| s as f64 * dt).collect();
        Ok((DelaySpec::new(lags).map_err(|e| CliError::config(e.to_string()))?, true))
    }

    pub fn model_spec(&self, n_series: usize) -> Result<ModelSpec, CliError> {
        Ok(ModelSpec {
            n_series,
            delays: self.delays()?.0,
            n_aug: self.n_aug,
            hidden: self.hidden.clone(),
            weight_norm: self.weight_norm,
            layer_norm: self.layer_norm,
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            rho: self.rho,
            lr: self.lr,
            n_max: self.n_max,
            n_batch: self.n_batch,
            l_batch: self.l_batch,
            optimizer: self.optimizer,
            solver: SolverSpec::rk4(),
            seed,
            prune_persistent: self.prune_persistent,
        }
    }

    pub fn lorenz_spec(&self) -> Lorenz96Spec {
        Lorenz96Spec {
            n: self.n_series,
            forcing: self.forcing,
            dt: self.dt,
            t_end: self.t_end,
            n_trajectories: self.n_trajectories,
            seed: self.data_seed,
        }
    }

    pub fn mackey_glass_spec(&self) -> MackeyGlassSpec {
        MackeyGlassSpec {
            dt: self.dt,
            t_end: self.t_end,
            ..MackeyGlassSpec::default()
        }
    }

    pub fn surrogate_spec(&self) -> SurrogateSpec {
        let d = SurrogateSpec::default();
        SurrogateSpec {
            n_events: self.n_events,
            dt: self.dt,
            n_points: (self.t_end / self.dt).round() as usize + 1,
            noise: self.noise,
            seed: self.data_seed,
            ..d
        }
    }
}

/// Parses `alpha=0.1,0.01;rho=0.1,0.01` into per-key value lists.
pub fn parse_grid(s: &str) -> Result<Vec<(String, Vec<Value>)>, CliError> {
    let mut out = Vec::new();
    for part in s.split(';').filter(|p| !p.trim().is_empty()) {
        let (k, vs) = part
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("grid entry {part:?} is not key=v1,v2")))?;
        let vals: Vec<Value> = vs
            .split(',')
            .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().into())))
            .collect();
        if vals.is_empty() {
            return Err(CliError::config(format!("grid key {k:?} has no values")));
        }
        out.push((k.trim().to_string(), vals));
    }
    Ok(out)
}

/// Cartesian product of a parsed grid as `key=value` override lists.
pub fn expand_grid(grid: &[(String, Vec<Value>)]) -> Vec<Vec<String>> {
    let mut combos: Vec<Vec<String>> = vec![vec![]];
    for (k, vals) in grid {
        let mut next = Vec::with_capacity(combos.len() * vals.len());
        for c in &combos {
            for v in vals {
                let mut c = c.clone();
                c.push(format!("{k}={v}"));
                next.push(c);
            }
        }
        combos = next;
    }
    combos
}

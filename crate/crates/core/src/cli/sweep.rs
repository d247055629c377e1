//! Parameter sweeps: a grid of overrides crossed with a list of seeds.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::Value;

use crate::ema::EmaMode;
use crate::error::{Error, Result};
use crate::negqueue::SliceWindow;
use crate::trainer::{self, Dataset, TrainConfig};

pub const PARAMETERS: [&str; 8] =
    ["ema_eta", "batch_size", "queue_capacity", "init_count", "slice_window", "pred_dim", "fgsm_epsilon", "tau"];

/// One swept parameter and its values. Values are numbers or strings
/// (`init_count` accepts fractions of the capacity like `"1/4"`,
/// `slice_window` accepts `"a-b"`, `"!a-b"` or `"all"`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub parameter: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Experiment config merged over its preset; path or inline object.
    #[serde(default)]
    pub base: Option<Value>,
    /// Crossed axes; the grid is their Cartesian product.
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::config("axes", "need at least one axis"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        for axis in &self.axes {
            if !PARAMETERS.contains(&axis.parameter.as_str()) {
                return Err(Error::config(
                    "parameter",
                    format!("unknown parameter {:?}; supported: {}", axis.parameter, PARAMETERS.join(", ")),
                ));
            }
            if axis.values.is_empty() {
                return Err(Error::config(axis.parameter.clone(), "no values"));
            }
        }
        Ok(())
    }

    /// Every grid point as a list of `(parameter, value)` settings, first
    /// axis varying slowest.
    pub fn grid(&self) -> Vec<Vec<(String, Value)>> {
        let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for axis in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((axis.parameter.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn as_f64(name: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::config(name, format!("expected a number, got {v}")))
}

fn as_usize(name: &str, v: &Value) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| Error::config(name, format!("expected a non-negative integer, got {v}")))
}

/// Applies the settings, queue capacity first so capacity-relative values
/// see the final size.
pub fn apply(base: &TrainConfig, settings: &[(String, Value)]) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    let rank = |name: &str| usize::from(name != "queue_capacity");
    let mut ordered: Vec<&(String, Value)> = settings.iter().collect();
    ordered.sort_by_key(|(n, _)| rank(n));
    for (name, v) in ordered {
        match name.as_str() {
            "ema_eta" => cfg.ema = EmaMode::Constant { eta: as_f64(name, v)? },
            "batch_size" => cfg.batch_size = as_usize(name, v)?,
            "queue_capacity" => {
                cfg.queue.capacity = as_usize(name, v)?;
                cfg.queue.init_count = cfg.queue.init_count.min(cfg.queue.capacity);
            }
            "init_count" => cfg.queue.init_count = parse_init_count(v, cfg.queue.capacity)?,
            "slice_window" => {
                cfg.queue.slice = match v.as_str() {
                    Some("all") => None,
                    Some(s) => Some(s.parse::<SliceWindow>()?),
                    None => return Err(Error::config(name, format!("expected a string, got {v}"))),
                }
            }
            "pred_dim" => cfg.encoder.pred_dim = as_usize(name, v)?,
            "fgsm_epsilon" => cfg.augment.fgsm_epsilon = as_f64(name, v)?,
            "tau" => cfg.loss.temperature = as_f64(name, v)?,
            other => return Err(Error::config("parameter", format!("unknown parameter {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_init_count(v: &Value, capacity: usize) -> Result<usize> {
    if let Some(n) = v.as_u64() {
        return Ok(n as usize);
    }
    let bad = || Error::config("init_count", format!("expected an integer or a fraction like \"1/4\", got {v}"));
    let s = v.as_str().ok_or_else(bad)?;
    let (num, den) = s.split_once('/').ok_or_else(bad)?;
    let num: usize = num.trim().parse().map_err(|_| bad())?;
    let den: usize = den.trim().parse().map_err(|_| bad())?;
    if den == 0 || num > den {
        return Err(bad());
    }
    Ok(capacity * num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub seed: u64,
    pub best_eval: f64,
    pub mtd: f64,
    pub collapsed: bool,
}

/// Runs every (grid point, seed) pair on up to `jobs` threads. Rows come back
/// in grid order, then seed order, whatever the scheduling.
pub fn run(spec: &SweepSpec, base: &TrainConfig, data: &Dataset, jobs: usize) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let grid = spec.grid();
    let mut tasks = Vec::new();
    for (gi, point) in grid.iter().enumerate() {
        let cfg = apply(base, point)?;
        for (si, &seed) in spec.seeds.iter().enumerate() {
            tasks.push((gi, si, point, TrainConfig { master_seed: seed, ..cfg.clone() }));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    let mut results: Vec<(usize, usize, SweepRow)> = pool.install(|| {
        tasks
            .into_par_iter()
            .map(|(gi, si, point, cfg)| {
                let (report, _) = trainer::train(&cfg, data)?;
                let row = SweepRow {
                    parameter: point.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join("&"),
                    value: point.iter().map(|(_, v)| render(v)).collect::<Vec<_>>().join("&"),
                    seed: cfg.master_seed,
                    best_eval: report.best_eval,
                    mtd: report.mtd,
                    collapsed: report.collapsed,
                };
                Ok((gi, si, row))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    results.sort_by_key(|(gi, si, _)| (*gi, *si));
    Ok(results.into_iter().map(|(_, _, r)| r).collect())
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("parameter,value,seed,best_eval,mtd,collapsed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.parameter, r.value, r.seed, r.best_eval, r.mtd, r.collapsed);
    }
    out
}

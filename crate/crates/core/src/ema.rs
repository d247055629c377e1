//! EMA decay scheduling and target-branch updates.

use serde::{Deserialize, Serialize};

use crate::encoder::BranchParams;
use crate::error::{Error, Result};

/// Half-cosine ramp of the decay weight from `eta_start` to `eta_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub eta_start: f64,
    pub eta_end: f64,
    pub total_steps: usize,
}

impl EmaSchedule {
    pub fn new(eta_start: f64, eta_end: f64, total_steps: usize) -> Result<Self> {
        let s = Self { eta_start, eta_end, total_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eta_start && self.eta_start <= self.eta_end && self.eta_end < 1.0) {
            return Err(Error::config(
                "ema",
                format!("need 0 <= eta_start <= eta_end < 1, got {} and {}", self.eta_start, self.eta_end),
            ));
        }
        Ok(())
    }

    /// `eta_end - (eta_end - eta_start) * (cos(pi * step / total) + 1) / 2`.
    pub fn eta_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract("eta_at", format!("step {step} beyond {} total steps", self.total_steps)));
        }
        if step == self.total_steps {
            return Ok(self.eta_end);
        }
        if self.total_steps == 0 || step == 0 {
            return Ok(self.eta_start);
        }
        let phase = std::f64::consts::PI * step as f64 / self.total_steps as f64;
        Ok(self.eta_end - (self.eta_end - self.eta_start) * (phase.cos() + 1.0) / 2.0)
    }
}

/// Decay weight policy: cosine schedule or a constant (used by sweeps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmaMode {
    Schedule { eta_start: f64, eta_end: f64 },
    Constant { eta: f64 },
}

impl Default for EmaMode {
    fn default() -> Self {
        Self::Schedule { eta_start: 0.75, eta_end: 0.95 }
    }
}

impl EmaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Schedule { eta_start, eta_end } => EmaSchedule { eta_start, eta_end, total_steps: 0 }.validate(),
            Self::Constant { eta } if (0.0..=1.0).contains(&eta) => Ok(()),
            Self::Constant { eta } => Err(Error::config("ema.eta", format!("{eta} outside [0, 1]"))),
        }
    }

    pub fn eta_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        match *self {
            Self::Schedule { eta_start, eta_end } => EmaSchedule { eta_start, eta_end, total_steps }.eta_at(step),
            Self::Constant { eta } => Ok(eta),
        }
    }

    /// Decay weight that summarizes the run for traceable-distance reporting.
    pub fn nominal_eta(&self) -> f64 {
        match *self {
            Self::Schedule { eta_end, .. } => eta_end,
            Self::Constant { eta } => eta,
        }
    }
}

/// `target <- eta * target + (1 - eta) * online` on every shared weight.
/// The online prediction stack has no target counterpart and is skipped.
pub fn ema_update(target: &mut BranchParams, online: &BranchParams, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::contract("ema_update", format!("eta {eta} outside [0, 1]")));
    }
    if target.has_predictor() {
        return Err(Error::contract("ema_update", "target branch must not carry a prediction stack"));
    }
    for t in target.params_mut() {
        let o = online
            .get(&t.name)
            .ok_or_else(|| Error::contract("ema_update", format!("online branch has no {}", t.name)))?;
        if o.shape != t.shape {
            return Err(Error::contract(
                "ema_update",
                format!("{}: target {:?} vs online {:?}", t.name, t.shape, o.shape),
            ));
        }
        if eta == 1.0 {
            continue;
        }
        for (w, &v) in t.values.iter_mut().zip(&o.values) {
            *w = eta * *w + (1.0 - eta) * v;
        }
    }
    Ok(())
}

/// `sum_{i=0}^{k} (1 - eta) * eta^i * (i + 1)` by direct summation: the
/// expected age, in updates, of the online weights folded into the target.
pub fn traceable_partial_sum(eta: f64, k: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::domain("traceable_partial_sum", format!("eta {eta} outside [0, 1)")));
    }
    let mut power = 1.0;
    let mut sum = 0.0;
    for i in 0..=k {
        sum += (1.0 - eta) * power * (i + 1) as f64;
        power *= eta;
    }
    Ok(sum)
}

use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sorted_vars;

/// Linear momentum ramp `τ_t = τ_base + t·(τ_final − τ_base)/T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub tau_base: f64,
    pub tau_final: f64,
    pub total_iterations: u64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self {
            tau_base: 0.999,
            tau_final: 1.0,
            total_iterations: 1,
        }
    }
}

impl EmaSchedule {
    pub fn new(total_iterations: u64) -> Self {
        Self {
            total_iterations,
            ..Self::default()
        }
    }

    /// Momentum at iteration `t`, clamped to `[0, T]`.
    pub fn momentum(&self, t: u64) -> f64 {
        if self.total_iterations == 0 {
            return self.tau_final;
        }
        let f = t.min(self.total_iterations) as f64 / self.total_iterations as f64;
        // weighted form keeps both endpoints exact
        self.tau_base * (1.0 - f) + self.tau_final * f
    }
}

/// `target ← τ·target + (1−τ)·online` for every target variable, evaluated
/// as `target + (1−τ)·(online − target)` so equal weights stay bit-identical.
/// Returns the momentum used.
pub fn ema_update(online: &VarMap, target: &VarMap, t: u64, schedule: &EmaSchedule) -> Result<f64> {
    let tau = schedule.momentum(t);
    let online_data = online.data().lock().unwrap();
    for (name, var) in sorted_vars(target) {
        let src = online_data
            .get(&name)
            .ok_or_else(|| Error::shape(format!("online parameters lack `{name}`")))?;
        if src.shape() != var.shape() {
            return Err(Error::shape(format!(
                "`{name}`: online {:?} vs target {:?}",
                src.shape(),
                var.shape()
            )));
        }
        let cur = var.as_detached_tensor();
        let next = (&cur + ((src.as_detached_tensor() - &cur)? * (1.0 - tau))?)?;
        var.set(&next)?;
    }
    Ok(tau)
}

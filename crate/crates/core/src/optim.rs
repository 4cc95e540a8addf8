//! AdamW with decoupled weight decay and inspectable moment buffers.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Learning rate and weight decay are passed to every [`AdamW::step`] so a
/// schedule can drive them. Biases, norms and other rank-≤1 parameters are
/// not decayed.
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    step: u64,
}

impl AdamW {
    /// `vars` in a stable order (see [`crate::nn::sorted_vars`]).
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64, weight_decay: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach().to_dtype(slot.m.dtype())?;
            slot.m = ((&slot.m * b1)? + (&g * (1.0 - b1))?)?;
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&slot.m / c1)?;
            let v_hat = (&slot.v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let mut theta = slot.var.as_tensor().detach();
            if slot.var.rank() >= 2 && weight_decay != 0.0 {
                theta = (&theta * (1.0 - lr * weight_decay))?;
            }
            slot.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// First and second moments keyed by parameter name.
    pub fn state(&self) -> (HashMap<String, Tensor>, HashMap<String, Tensor>) {
        let m = self.slots.iter().map(|s| (s.name.clone(), s.m.clone())).collect();
        let v = self.slots.iter().map(|s| (s.name.clone(), s.v.clone())).collect();
        (m, v)
    }

    pub fn load_state(&mut self, m: &HashMap<String, Tensor>, v: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for slot in &mut self.slots {
            let (Some(mt), Some(vt)) = (m.get(&slot.name), v.get(&slot.name)) else {
                return Err(Error::Checkpoint(format!("optimizer state lacks `{}`", slot.name)));
            };
            if mt.shape() != slot.m.shape() || vt.shape() != slot.v.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for `{}` has shape {:?}, expected {:?}",
                    slot.name,
                    mt.shape(),
                    slot.m.shape()
                )));
            }
            slot.m = mt.to_dtype(slot.m.dtype())?;
            slot.v = vt.to_dtype(slot.v.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Adam(W) with per-parameter moments and step counts. Parameters that get
/// no learning rate or no gradient in a step are left untouched, moments
/// included.
pub struct Adam {
    pub cfg: AdamConfig,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: BTreeMap::new(),
        })
    }

    /// Applies one update; `lr_for` maps a parameter name to its learning
    /// rate or `None` to freeze it. Returns the names that changed.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr_for: &dyn Fn(&str) -> Option<f64>) -> Result<Vec<String>> {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let mut updated = Vec::new();
        for (name, var) in store.params() {
            let Some(lr) = lr_for(name) else { continue };
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let p = var.as_tensor().detach();
            let st = match self.state.remove(name) {
                Some(s) => s,
                None => Moments {
                    m: p.zeros_like()?,
                    v: p.zeros_like()?,
                    step: 0,
                },
            };
            let step = st.step + 1;
            let m = ((st.m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((st.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let c1 = 1.0 - beta1.powi(step as i32);
            let c2 = 1.0 - beta2.powi(step as i32);
            let denom = ((&v / c2)?.sqrt()? + eps)?;
            let upd = ((&m / c1)?.div(&denom)? * lr)?;
            let decayed = if weight_decay > 0.0 { (&p * (1.0 - lr * weight_decay))? } else { p };
            var.set(&(decayed - upd)?)?;
            self.state.insert(name.to_string(), Moments { m, v, step });
            updated.push(name.to_string());
        }
        Ok(updated)
    }
}

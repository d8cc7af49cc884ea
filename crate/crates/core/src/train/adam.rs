use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be checkpointed next to the weights.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * beta1)? + (g * (1.0 - beta1))?)?,
                    ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                ),
                None => ((g * (1.0 - beta1))?, (g.sqr()? * (1.0 - beta2))?),
            };
            if lr != 0.0 {
                let update = ((&m / c1)?.div(&((&v / c2)?.sqrt()? + eps)?)? * lr)?;
                var.set(&(var.as_tensor() - update)?)?;
            }
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moments as `m.<name>` / `v.<name>` tensors plus the step count.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        (self.step, out)
    }

    pub fn restore(cfg: AdamConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (key, m) in tensors {
            if let Some(name) = key.strip_prefix("m.") {
                let v = tensors
                    .get(&format!("v.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks v.{name}")))?;
                moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(Self { cfg, step, moments })
    }
}

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment gradient descent with fully exposed state, so a resumed
/// run continues bit-for-bit.
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.iter() {
            first.insert(name.clone(), var.as_tensor().zeros_like()?);
            second.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { cfg, step: 0, first, second })
    }

    pub fn update(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            // Parameters outside the loss graph have no gradient; skip them.
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = self.first.get_mut(name).expect("moment for every parameter");
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = self.second.get_mut(name).expect("moment for every parameter");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (delta * lr)?)?)?;
        }
        Ok(())
    }
}

/// Exponential moving average of parameters. The effective decay after `n`
/// updates is `min(decay, (1 + n)/(10 + n))`.
pub struct Ema {
    pub decay: f64,
    pub updates: u64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(decay: f64, params: &ParamStore) -> Result<Self> {
        Ok(Self { decay, updates: 0, shadow: params.snapshot()? })
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        let decay = self.effective_decay();
        for (name, var) in params.iter() {
            let s = self.shadow.get_mut(name).expect("shadow for every parameter");
            *s = ((&*s * decay)? + (var.as_tensor().detach() * (1.0 - decay))?)?;
        }
        self.updates += 1;
        Ok(())
    }
}

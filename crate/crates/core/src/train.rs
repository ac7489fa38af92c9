//! Optimizer loop shared by both model families: Adam steps, EMA tracking,
//! the loss curve, and checkpoint (de)serialization of all of it.

use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, AdamConfig, Ema, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 64, lr: 1e-4, ema_decay: 0.9999 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be finite and nonnegative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Loss values of a curve as raw bits, for bitwise comparisons.
pub fn curve_bits(curve: &[LossRow]) -> Vec<(usize, u64)> {
    curve.iter().map(|r| (r.step, r.loss.to_bits())).collect()
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    adam: AdamConfig,
    adam_step: u64,
    ema_decay: f64,
    ema_updates: u64,
    rng: Rng,
    curve: Vec<LossRow>,
}

/// Everything that evolves during training. Restoring it from a checkpoint
/// continues the run bit-for-bit.
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub ema: Ema,
    pub rng: Rng,
    pub step: usize,
    pub curve: Vec<LossRow>,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: Adam::new(cfg.adam(), &params)?,
            ema: Ema::new(cfg.ema_decay, &params)?,
            params,
            rng,
            step: 0,
            curve: Vec::new(),
        })
    }

    /// One optimizer step on the loss returned by `loss_fn`, which draws its
    /// minibatch and noise from the supplied generator.
    pub fn step<F>(&mut self, mut loss_fn: F) -> Result<f64>
    where
        F: FnMut(&mut Rng) -> Result<Tensor>,
    {
        let start = Instant::now();
        let step = self.step;
        let loss = loss_fn(&mut self.rng).map_err(|e| match e {
            Error::NonFiniteAtSigma { sigma, context } => {
                Error::NonFiniteAtStep { step, context: format!("sigma {sigma}: {context}") }
            }
            other => other,
        })?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteAtStep { step, context: format!("loss {value}") });
        }
        let grads = loss.backward()?;
        self.adam.update(&self.params, &grads)?;
        self.ema.update(&self.params)?;
        self.step += 1;
        self.curve.push(LossRow { step, loss: value, wall_ms: start.elapsed().as_secs_f64() * 1e3 });
        Ok(value)
    }

    /// Store holding the EMA weights, for sampling.
    pub fn ema_params(&self) -> Result<ParamStore> {
        ParamStore::from_tensors(&self.ema.shadow)
    }

    pub fn write(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.insert_group("params", &self.params.snapshot()?);
        ckpt.insert_group("ema", &self.ema.shadow);
        ckpt.insert_group("adam_m", &self.adam.first);
        ckpt.insert_group("adam_v", &self.adam.second);
        let meta = StateMeta {
            step: self.step,
            adam: self.adam.cfg,
            adam_step: self.adam.step,
            ema_decay: self.ema.decay,
            ema_updates: self.ema.updates,
            rng: self.rng.clone(),
            curve: self.curve.clone(),
        };
        ckpt.meta["train"] = serde_json::to_value(meta)?;
        Ok(())
    }

    /// Restore into `params`, a store already holding every parameter of the
    /// rebuilt model with the shapes the checkpoint must match.
    pub fn read(ckpt: &Checkpoint, params: ParamStore) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(
            ckpt.meta.get("train").cloned().ok_or_else(|| Error::IncompatibleCheckpoint("no training state".into()))?,
        )?;
        params.load(&ckpt.group("params"))?;
        let check = |group: &str| -> Result<std::collections::BTreeMap<String, Tensor>> {
            let g = ckpt.group(group);
            let template = ParamStore::from_tensors(&g)?;
            let names: Vec<&String> = params.iter().map(|(k, _)| k).collect();
            let got: Vec<&String> = template.iter().map(|(k, _)| k).collect();
            if names != got {
                return Err(Error::IncompatibleCheckpoint(format!("group {group} does not match the model parameters")));
            }
            Ok(g)
        };
        let adam = Adam { cfg: meta.adam, step: meta.adam_step, first: check("adam_m")?, second: check("adam_v")? };
        let ema = Ema { decay: meta.ema_decay, updates: meta.ema_updates, shadow: check("ema")? };
        Ok(Self { params, adam, ema, rng: meta.rng, step: meta.step, curve: meta.curve })
    }
}

/// Minibatch of `batch` indices drawn uniformly with replacement.
pub fn minibatch(n: usize, batch: usize, rng: &mut Rng) -> Result<Tensor> {
    use rand::Rng as _;
    if n == 0 {
        return Err(invalid("cannot draw a minibatch from an empty dataset"));
    }
    let idx: Vec<u32> = (0..batch).map(|_| rng.random_range(0..n) as u32).collect();
    Ok(Tensor::from_vec(idx, batch, &candle_core::Device::Cpu)?)
}

//! Flat experiment configuration and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aux_model::AuxModelConfig;
use crate::data::toy::RingConfig;
use crate::data::{AugmentConfig, AUG_OPS};
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{ExtractorKind, FidConfig};
use crate::image_model::{Backbone, CondInit, ImageModelConfig, Regime};
use crate::pipeline::{Method, StageConfig};
use crate::train::TrainConfig;

/// Hex digits of the config hash used in file names.
pub const HASH_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// 2-D Gaussian ring with paired one-hot-plus-noise embeddings.
    Ring,
    /// Image manifest with an embedding cache.
    Manifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Proxy,
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepArm {
    Pca,
    Kmeans,
}

impl SweepArm {
    pub fn name(self) -> &'static str {
        match self {
            SweepArm::Pca => "pca",
            SweepArm::Kmeans => "kmeans",
        }
    }
}

/// Every knob of a run. `(config, seed)` determines all artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub manifest: Option<PathBuf>,
    pub embedder: EmbedderKind,
    pub proxy_dim: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Not part of the hash: methods of one config share caches.
    pub method: Method,
    pub class_conditional: bool,

    pub ring_modes: usize,
    pub ring_radius: f64,
    pub ring_mode_std: f64,
    pub ring_embed_noise: f64,
    pub ring_count: usize,
    pub ring_holdout: usize,
    pub ring_reference: usize,

    pub aux_token_dim: usize,
    pub aux_layers: usize,
    pub aux_heads: usize,
    pub aux_steps: usize,
    pub aux_batch: usize,
    pub aux_lr: f64,
    pub aux_ema_decay: f64,

    pub image_backbone: Backbone,
    pub image_base_width: usize,
    pub image_channel_multipliers: Vec<usize>,
    pub image_attention_resolutions: Vec<usize>,
    pub image_embed_width: usize,
    pub image_mlp_depth: usize,
    pub image_steps: usize,
    pub image_batch: usize,
    pub image_lr: f64,
    pub image_ema_decay: f64,
    pub cond_init: CondInit,
    /// Unconditional image checkpoint to extend with a conditioning projection.
    pub finetune_base: Option<PathBuf>,

    pub kmeans_k: usize,

    /// Augmented copies per training image; 0 disables augmentation labels.
    pub aug_views: usize,
    pub aug_probability: f64,
    pub aug_max_rotation_deg: f64,
    pub aug_brightness: f64,
    pub aug_contrast: f64,
    pub aug_buckets: u8,

    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub embed_sample_steps: usize,
    pub embed_churn: f64,
    pub image_sample_steps: usize,
    pub image_churn: f64,
    pub image_noise: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub sample_count: usize,
    pub sample_batch: usize,

    pub eval_n: usize,
    pub eval_extractor: ExtractorKind,
    pub eval_shrinkage: f64,

    pub checkpoint_every: usize,
    pub keep_last: usize,
    pub heldout_n: usize,

    pub sweep_arms: Vec<SweepArm>,
    pub sweep_dims: Vec<usize>,
    pub sweep_budgets: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ring = RingConfig::default();
        let aug = AugmentConfig::default();
        let schedule = ScheduleConfig::default();
        let image_sampler = SamplerConfig::default();
        Self {
            dataset: DatasetKind::Ring,
            manifest: None,
            embedder: EmbedderKind::Proxy,
            proxy_dim: 64,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            method: Method::Vcdm,
            class_conditional: false,
            ring_modes: ring.modes,
            ring_radius: ring.radius,
            ring_mode_std: ring.mode_std,
            ring_embed_noise: ring.embed_noise,
            ring_count: ring.count,
            ring_holdout: 512,
            ring_reference: 10_000,
            aux_token_dim: 32,
            aux_layers: 2,
            aux_heads: 2,
            aux_steps: 1500,
            aux_batch: 128,
            aux_lr: 2e-3,
            aux_ema_decay: 0.999,
            image_backbone: Backbone::Mlp,
            image_base_width: 128,
            image_channel_multipliers: vec![1, 2, 2],
            image_attention_resolutions: vec![4],
            image_embed_width: 64,
            image_mlp_depth: 3,
            image_steps: 1500,
            image_batch: 128,
            image_lr: 2e-3,
            image_ema_decay: 0.999,
            cond_init: CondInit::Random,
            finetune_base: None,
            kmeans_k: 8,
            aug_views: 0,
            aug_probability: aug.probability,
            aug_max_rotation_deg: aug.max_rotation_deg,
            aug_brightness: aug.brightness,
            aug_contrast: aug.contrast,
            aug_buckets: aug.buckets,
            sigma_min: schedule.sigma_min,
            sigma_max: schedule.sigma_max,
            rho: schedule.rho,
            embed_sample_steps: 64,
            embed_churn: 0.0,
            image_sample_steps: image_sampler.num_steps,
            image_churn: image_sampler.s_churn,
            image_noise: image_sampler.s_noise,
            s_tmin: image_sampler.s_tmin,
            s_tmax: image_sampler.s_tmax,
            sample_count: 64,
            sample_batch: 256,
            eval_n: 2000,
            eval_extractor: ExtractorKind::Identity,
            eval_shrinkage: 0.0,
            checkpoint_every: 500,
            keep_last: 3,
            heldout_n: 256,
            sweep_arms: vec![SweepArm::Pca, SweepArm::Kmeans],
            sweep_dims: vec![1, 2, 4, 8],
            sweep_budgets: vec![200, 1500],
            sweep_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Configuration(msg) => Error::Configuration(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Configuration(msg));
        if self.dataset == DatasetKind::Manifest && self.manifest.is_none() {
            return bad("dataset = \"manifest\" needs a manifest path".into());
        }
        if self.dataset == DatasetKind::Ring {
            if self.image_backbone != Backbone::Mlp {
                return bad("the ring dataset is 2-D and needs image_backbone = \"mlp\"".into());
            }
            if self.aug_views > 0 {
                return bad("augmentation applies to images; set aug_views = 0 for the ring dataset".into());
            }
            if self.ring_modes == 0 || self.ring_count == 0 || self.ring_reference < 2 {
                return bad("ring_modes, ring_count and ring_reference must be positive".into());
            }
        }
        if self.checkpoint_every == 0 || self.keep_last == 0 {
            return bad("checkpoint_every and keep_last must be positive".into());
        }
        if self.sample_batch == 0 || self.heldout_n == 0 {
            return bad("sample_batch and heldout_n must be positive".into());
        }
        if self.aug_buckets == 0 || self.aug_buckets % 2 != 0 {
            return bad(format!("aug_buckets must be even and positive, got {}", self.aug_buckets));
        }
        self.aux_train().validate()?;
        self.image_train().validate()?;
        Ok(())
    }

    /// Lowercase hex SHA-256 prefix over every field except `method`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("method");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(digest)[..HASH_LEN].to_string()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn ring(&self) -> RingConfig {
        RingConfig {
            modes: self.ring_modes,
            radius: self.ring_radius,
            mode_std: self.ring_mode_std,
            embed_noise: self.ring_embed_noise,
            count: self.ring_count,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            probability: self.aug_probability,
            max_rotation_deg: self.aug_max_rotation_deg,
            brightness: self.aug_brightness,
            contrast: self.aug_contrast,
            buckets: self.aug_buckets,
        }
    }

    pub fn aug_label_dim(&self) -> usize {
        if self.aug_views > 0 {
            AUG_OPS
        } else {
            0
        }
    }

    pub fn aux_train(&self) -> TrainConfig {
        TrainConfig { steps: self.aux_steps, batch_size: self.aux_batch, lr: self.aux_lr, ema_decay: self.aux_ema_decay }
    }

    pub fn image_train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.image_steps,
            batch_size: self.image_batch,
            lr: self.image_lr,
            ema_decay: self.image_ema_decay,
        }
    }

    pub fn aux_model(&self, embed_dim: usize, class_count: Option<usize>) -> AuxModelConfig {
        AuxModelConfig {
            embed_dim,
            token_dim: self.aux_token_dim,
            num_layers: self.aux_layers,
            num_heads: self.aux_heads,
            class_count,
            aug_label_dim: self.aug_label_dim(),
        }
    }

    /// Image model for items of shape `(channels, resolution, resolution)`,
    /// or flat `channels`-vectors for the MLP backbone.
    pub fn image_model(
        &self,
        regime: Regime,
        y_dim: usize,
        channels: usize,
        resolution: usize,
        class_count: Option<usize>,
    ) -> ImageModelConfig {
        ImageModelConfig {
            backbone: self.image_backbone,
            resolution,
            channels,
            base_width: self.image_base_width,
            channel_multipliers: self.image_channel_multipliers.clone(),
            attention_resolutions: self.image_attention_resolutions.clone(),
            embed_width: self.image_embed_width,
            mlp_depth: self.image_mlp_depth,
            regime,
            y_dim: if regime == Regime::Unconditional { 0 } else { y_dim },
            class_count,
            aug_label_dim: self.aug_label_dim(),
            cond_init: self.cond_init,
        }
    }

    fn schedule(&self, num_steps: usize) -> ScheduleConfig {
        ScheduleConfig { sigma_min: self.sigma_min, sigma_max: self.sigma_max, rho: self.rho, num_steps }
    }

    pub fn stage1(&self) -> StageConfig {
        let sampler = SamplerConfig {
            num_steps: self.embed_sample_steps,
            s_churn: self.embed_churn,
            stochastic: self.embed_churn > 0.0,
            s_tmin: self.s_tmin,
            s_tmax: self.s_tmax,
            ..SamplerConfig::default()
        };
        StageConfig { sampler, schedule: self.schedule(self.embed_sample_steps) }
    }

    pub fn stage2(&self) -> StageConfig {
        let sampler = SamplerConfig {
            num_steps: self.image_sample_steps,
            s_churn: self.image_churn,
            s_noise: self.image_noise,
            s_tmin: self.s_tmin,
            s_tmax: self.s_tmax,
            stochastic: self.image_churn > 0.0,
        };
        StageConfig { sampler, schedule: self.schedule(self.image_sample_steps) }
    }

    pub fn fid(&self, n: usize) -> FidConfig {
        FidConfig { n, shrinkage: self.eval_shrinkage, batch: self.sample_batch }
    }

    /// Image-model regime a sampling method needs.
    pub fn regime_for(method: Method) -> Regime {
        match method {
            Method::Vcdm | Method::VcdmOracle => Regime::Embedding,
            Method::EdmDirect => Regime::Unconditional,
            Method::ClassCond => Regime::ClusterId,
        }
    }

    pub fn check_sweep_grid(&self, embed_dim: usize) -> Result<()> {
        if let Some(&d) = self.sweep_dims.iter().find(|&&d| d == 0 || d > embed_dim) {
            return Err(invalid(format!("sweep dimension {d} outside 1..={embed_dim} (embedder dimension)")));
        }
        if self.sweep_budgets.is_empty() || self.sweep_seeds.is_empty() || self.sweep_arms.is_empty() {
            return Err(invalid("sweep needs at least one arm, budget and seed"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("seed = 1\nsede = 2\n").unwrap_err();
        assert!(matches!(err, Error::Configuration(_)), "{err}");
    }

    #[test]
    fn hash_ignores_method_but_not_seed() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { method: Method::EdmDirect, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.with_seed(1).hash());
        assert_eq!(a.hash().len(), HASH_LEN);
    }

    #[test]
    fn ring_rejects_unet() {
        let err = ExperimentConfig::parse("image_backbone = \"unet\"\n").unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn sweep_grid_above_embedder_dim_is_invalid() {
        let cfg = ExperimentConfig { sweep_dims: vec![2, 9], ..Default::default() };
        assert!(matches!(cfg.check_sweep_grid(8), Err(Error::InvalidArgument(_))));
        assert!(cfg.check_sweep_grid(9).is_ok());
    }
}

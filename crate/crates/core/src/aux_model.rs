//! Transformer diffusion denoiser over embedding vectors: the stage-1 prior
//! `p(y | a)`.
//!
//! The input sequence is, in order: a σ token, a class token when `a` is a
//! label, the noisy-embedding token, an augmentation token when labels are in
//! use, and a learned query token. The output is read at the query token.

use std::path::Path;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    denoising_loss, estimate_sigma_data, noise_embedding, precondition, sample, CondInput, Conditioning, Denoiser,
    LossWeighting, NoiseEmbed, Preconditioned, RawNet, SamplerConfig, ScheduleConfig,
};
use crate::embedding::{Embedding, SourceTag};
use crate::error::{invalid, Error, Result};
use crate::nn::{Builder, Init, LayerNorm, Linear, ParamStore, SelfAttention};
use crate::rng::{seeded, split_seed, NoiseSource, Rng};
use crate::train::{minibatch, TrainConfig, TrainState};

pub const KIND: &str = "aux";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxModelConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub class_count: Option<usize>,
    pub aug_label_dim: usize,
}

impl Default for AuxModelConfig {
    fn default() -> Self {
        Self { embed_dim: 512, token_dim: 512, num_layers: 6, num_heads: 8, class_count: None, aug_label_dim: 0 }
    }
}

impl AuxModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.token_dim == 0 {
            return Err(invalid("embedding and token widths must be positive"));
        }
        if self.num_layers == 0 {
            return Err(invalid("num_layers must be at least 1"));
        }
        if self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
            return Err(invalid(format!("token_dim {} not divisible by {} heads", self.token_dim, self.num_heads)));
        }
        if self.class_count == Some(0) {
            return Err(invalid("class_count must be positive when set"));
        }
        Ok(())
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Dimensions with (near-)zero spread keep unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(Vec::len).ok_or_else(|| invalid("cannot standardize an empty set"))?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("rows have differing dimensions"));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let scale = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], scale: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Sigma,
    Class,
    Noisy,
    Aug,
    Query,
}

impl TokenKind {
    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new(b: &mut Builder, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut b.pp("ln1"), width)?,
            attn: SelfAttention::new(&mut b.pp("attn"), width, heads)?,
            ln2: LayerNorm::new(&mut b.pp("ln2"), width)?,
            ff1: Linear::new(&mut b.pp("ff1"), width, 4 * width)?,
            ff2: Linear::new(&mut b.pp("ff2"), 4 * width, width)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&h)?)?.gelu()?)?;
        Ok((h + f)?)
    }
}

/// The raw transformer `F` before preconditioning.
#[derive(Clone)]
pub struct AuxNet {
    cfg: AuxModelConfig,
    sigma: NoiseEmbed,
    class_table: Option<Tensor>,
    y_in: Option<Linear>,
    aug_in: Option<Linear>,
    query: Tensor,
    slots: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
}

impl AuxNet {
    pub fn new(b: &mut Builder, cfg: &AuxModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.token_dim;
        let class_table = match cfg.class_count {
            Some(n) => Some(b.get("class_table", &[n, w], Init::Normal(1.0))?),
            None => None,
        };
        let y_in = if cfg.embed_dim != w { Some(Linear::new(&mut b.pp("y_in"), cfg.embed_dim, w)?) } else { None };
        let aug_in = if cfg.aug_label_dim > 0 { Some(Linear::new(&mut b.pp("aug_in"), cfg.aug_label_dim, w)?) } else { None };
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(&mut b.pp(&format!("block{i}")), w, cfg.num_heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            sigma: noise_embedding(&mut b.pp("sigma"), w)?,
            class_table,
            y_in,
            aug_in,
            query: b.get("query", &[w], Init::Normal(1.0))?,
            slots: b.get("slots", &[5, w], Init::Normal(0.02))?,
            blocks,
            ln_out: LayerNorm::new(&mut b.pp("ln_out"), w)?,
            out: Linear::new(&mut b.pp("out"), w, cfg.embed_dim)?,
        })
    }

    /// Token kinds present for this conditioning, in sequence order.
    pub fn layout(&self, cond: &Conditioning) -> Vec<TokenKind> {
        let mut kinds = vec![TokenKind::Sigma];
        if cond.class.is_some() {
            kinds.push(TokenKind::Class);
        }
        kinds.push(TokenKind::Noisy);
        if self.aug_in.is_some() {
            kinds.push(TokenKind::Aug);
        }
        kinds.push(TokenKind::Query);
        kinds
    }

    /// The `(batch, tokens, token_dim)` input sequence with its layout.
    pub fn tokens(&self, x_in: &Tensor, c_noise: &Tensor, cond: &Conditioning) -> Result<(Vec<TokenKind>, Tensor)> {
        let (batch, d) = x_in.dims2()?;
        if d != self.cfg.embed_dim {
            return Err(invalid(format!("embedding has dimension {d}, model expects {}", self.cfg.embed_dim)));
        }
        let w = self.cfg.token_dim;
        let layout = self.layout(cond);
        let mut toks = Vec::with_capacity(layout.len());
        for kind in &layout {
            let t = match kind {
                TokenKind::Sigma => self.sigma.forward(c_noise)?,
                TokenKind::Class => self.class_token(cond.class.as_ref().expect("layout has a class token"))?,
                TokenKind::Noisy => match &self.y_in {
                    Some(l) => l.forward(x_in)?,
                    None => x_in.clone(),
                },
                TokenKind::Aug => {
                    let label = match &cond.aug {
                        Some(a) => {
                            if a.dims() != [batch, self.cfg.aug_label_dim] {
                                return Err(invalid(format!(
                                    "augmentation label shape {:?}, expected [{batch}, {}]",
                                    a.dims(),
                                    self.cfg.aug_label_dim
                                )));
                            }
                            a.clone()
                        }
                        None => Tensor::zeros((batch, self.cfg.aug_label_dim), x_in.dtype(), &Device::Cpu)?,
                    };
                    self.aug_in.as_ref().expect("layout has an aug token").forward(&label)?
                }
                TokenKind::Query => self.query.reshape((1, w))?.broadcast_as((batch, w))?,
            };
            let slot = self.slots.narrow(0, kind.slot(), 1)?;
            toks.push(t.broadcast_add(&slot)?);
        }
        Ok((layout, Tensor::stack(&toks, 1)?))
    }

    fn class_token(&self, ids: &Tensor) -> Result<Tensor> {
        let table = self.class_table.as_ref().ok_or_else(|| invalid("model was built without class conditioning"))?;
        let n = table.dim(0)?;
        let values: Vec<u32> = ids.to_vec1()?;
        if let Some(bad) = values.iter().find(|&&c| c as usize >= n) {
            return Err(invalid(format!("class id {bad} out of range for {n} classes")));
        }
        Ok(table.index_select(ids, 0)?)
    }
}

impl RawNet for AuxNet {
    fn forward(&self, x_in: &Tensor, c_noise: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        if cond.aug.is_some() && self.aug_in.is_none() {
            return Err(invalid("augmentation labels given to a model without an augmentation token"));
        }
        let (_, mut h) = self.tokens(x_in, c_noise, cond)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let last = h.dim(1)? - 1;
        let q = self.ln_out.forward(&h.narrow(1, last, 1)?.squeeze(1)?)?;
        self.out.forward(&q)
    }
}

#[derive(Serialize, Deserialize)]
struct AuxMeta {
    kind: String,
    config: AuxModelConfig,
    standardizer: Standardizer,
    sigma_data: f64,
    weighting: LossWeighting,
}

/// A preconditioned auxiliary denoiser together with the statistics that map
/// raw embeddings into its standardized space. `denoise` works in standardized
/// space.
#[derive(Clone)]
pub struct AuxModel {
    pub cfg: AuxModelConfig,
    pub standardizer: Standardizer,
    pub weighting: LossWeighting,
    pub params: ParamStore,
    net: std::sync::Arc<Preconditioned<AuxNet>>,
}

impl AuxModel {
    pub fn new(cfg: AuxModelConfig, standardizer: Standardizer, sigma_data: f64, rng: &mut Rng) -> Result<Self> {
        if standardizer.dim() != cfg.embed_dim {
            return Err(invalid(format!("standardizer has dimension {}, model {}", standardizer.dim(), cfg.embed_dim)));
        }
        let mut params = ParamStore::new();
        let net = AuxNet::new(&mut params.builder(rng), &cfg)?;
        let weighting = LossWeighting { sigma_data, ..LossWeighting::default() };
        Ok(Self { cfg, standardizer, weighting, params, net: std::sync::Arc::new(precondition(net, sigma_data)?) })
    }

    /// Rebuild around existing weights; every parameter must be present with
    /// the expected shape and no extra ones may remain.
    pub fn with_params(cfg: AuxModelConfig, standardizer: Standardizer, weighting: LossWeighting, params: ParamStore) -> Result<Self> {
        let mut probe = params.clone();
        let before = probe.len();
        let mut rng = seeded(0);
        let net = AuxNet::new(&mut probe.builder(&mut rng), &cfg)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("auxiliary model: {e}")))?;
        if probe.len() != before {
            return Err(Error::IncompatibleCheckpoint(format!(
                "auxiliary model expects {} parameter tensors, checkpoint has {before}",
                probe.len()
            )));
        }
        Ok(Self { cfg, standardizer, weighting, params, net: std::sync::Arc::new(precondition(net, weighting.sigma_data)?) })
    }

    pub fn sigma_data(&self) -> f64 {
        self.weighting.sigma_data
    }

    pub fn net(&self) -> &AuxNet {
        &self.net.net
    }

    /// Predicted clean standardized embeddings for a batch `(B, d)` of noisy
    /// standardized embeddings.
    pub fn aux_denoise(&self, y_sigma: &Tensor, sigma: &Tensor, a: &[CondInput], aug: Option<&Tensor>) -> Result<Tensor> {
        let cond = Conditioning { embedding: None, class: CondInput::batch_classes(a)?, aug: aug.cloned() };
        self.denoise(y_sigma, sigma, &cond)
    }

    /// Sample raw (de-standardized) embeddings, one per entry of `a`, under the
    /// no-augmentation label.
    pub fn sample_embeddings(
        &self,
        a: &[CondInput],
        sampler: &SamplerConfig,
        schedule: &ScheduleConfig,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<Embedding>> {
        let cond = self.sampling_conditioning(a)?;
        let z = sample(self, &cond, &[a.len(), self.cfg.embed_dim], sampler, schedule, noise)?;
        let rows: Vec<Vec<f64>> = z.to_vec2()?;
        rows.iter().map(|r| Embedding::new(self.standardizer.inverse(r), SourceTag::Proxy)).collect()
    }

    /// Conditioning used at sampling time: the class token per `a` and the
    /// all-zero "no augmentation" label.
    pub fn sampling_conditioning(&self, a: &[CondInput]) -> Result<Conditioning> {
        let aug = if self.cfg.aug_label_dim > 0 {
            Some(Tensor::zeros((a.len(), self.cfg.aug_label_dim), crate::nn::DTYPE, &Device::Cpu)?)
        } else {
            None
        };
        Ok(Conditioning { embedding: None, class: CondInput::batch_classes(a)?, aug })
    }

    fn meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(AuxMeta {
            kind: KIND.into(),
            config: self.cfg,
            standardizer: self.standardizer.clone(),
            sigma_data: self.sigma_data(),
            weighting: self.weighting,
        })?)
    }

    fn read_meta(ckpt: &Checkpoint) -> Result<AuxMeta> {
        let meta: AuxMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("not an auxiliary-model checkpoint: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::IncompatibleCheckpoint(format!("expected a {KIND} checkpoint, found {}", meta.kind)));
        }
        Ok(meta)
    }

    /// Sampling model from a checkpoint's EMA weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = Self::read_meta(ckpt)?;
        let params = ParamStore::from_tensors(&ckpt.group("ema"))?;
        Self::with_params(meta.config, meta.standardizer, meta.weighting, params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Denoiser for AuxModel {
    fn denoise(&self, x_sigma: &Tensor, sigma: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.net.denoise(x_sigma, sigma, cond)
    }
}

/// One training example: an embedding, its light conditioning, and the encoded
/// augmentation label (empty when labels are not in use).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxExample {
    pub embedding: Embedding,
    pub cond: CondInput,
    pub aug: Vec<f64>,
}

/// Training data prepared in standardized space.
struct AuxData {
    y: Tensor,
    cond: Conditioning,
}

impl AuxData {
    fn new(examples: &[AuxExample], cfg: &AuxModelConfig, standardizer: &Standardizer) -> Result<Self> {
        if examples.is_empty() {
            return Err(invalid("auxiliary training set is empty"));
        }
        let n = examples.len();
        let mut y = Vec::with_capacity(n * cfg.embed_dim);
        let mut aug = Vec::with_capacity(n * cfg.aug_label_dim);
        for (i, ex) in examples.iter().enumerate() {
            if ex.embedding.dim() != cfg.embed_dim {
                return Err(invalid(format!("example {i} has dimension {}, expected {}", ex.embedding.dim(), cfg.embed_dim)));
            }
            if ex.aug.len() != cfg.aug_label_dim {
                return Err(invalid(format!("example {i} has {} label entries, expected {}", ex.aug.len(), cfg.aug_label_dim)));
            }
            y.extend(standardizer.forward(&ex.embedding.values));
            aug.extend_from_slice(&ex.aug);
        }
        let conds: Vec<CondInput> = examples.iter().map(|e| e.cond).collect();
        let class = CondInput::batch_classes(&conds)?;
        if class.is_some() != cfg.class_count.is_some() {
            return Err(invalid("class labels must be present exactly when the model has class_count"));
        }
        let dev = Device::Cpu;
        let aug = if cfg.aug_label_dim > 0 { Some(Tensor::from_vec(aug, (n, cfg.aug_label_dim), &dev)?) } else { None };
        Ok(Self { y: Tensor::from_vec(y, (n, cfg.embed_dim), &dev)?, cond: Conditioning { embedding: None, class, aug } })
    }

    fn len(&self) -> usize {
        self.y.dim(0).unwrap_or(0)
    }
}

/// Live training run: the model being optimized, its optimizer state, and the
/// prepared data.
pub struct AuxTrainer {
    pub model: AuxModel,
    pub state: TrainState,
    pub train_cfg: TrainConfig,
    data: AuxData,
}

impl AuxTrainer {
    /// Parameters are drawn from child seed 0 of `seed`, minibatches and noise
    /// from child seed 1.
    pub fn new(examples: &[AuxExample], cfg: AuxModelConfig, train_cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rows: Vec<Vec<f64>> = examples.iter().map(|e| e.embedding.values.clone()).collect();
        let standardizer = Standardizer::fit(&rows)?;
        let data = AuxData::new(examples, &cfg, &standardizer)?;
        let standardized: Vec<Vec<f64>> = data.y.to_vec2()?;
        let sigma_data = if standardized.len() > 1 { estimate_sigma_data(&standardized).unwrap_or(1.0) } else { 1.0 };
        let model = AuxModel::new(cfg, standardizer, sigma_data, &mut seeded(split_seed(seed, 0)))?;
        let state = TrainState::new(model.params.clone(), &train_cfg, seeded(split_seed(seed, 1)))?;
        Ok(Self { model, state, train_cfg, data })
    }

    pub fn resume(examples: &[AuxExample], ckpt: &Checkpoint, train_cfg: TrainConfig) -> Result<Self> {
        let meta = AuxModel::read_meta(ckpt)?;
        let data = AuxData::new(examples, &meta.config, &meta.standardizer)?;
        let mut params = ParamStore::new();
        AuxNet::new(&mut params.builder(&mut seeded(0)), &meta.config)?;
        let state = TrainState::read(ckpt, params)?;
        let model = AuxModel::with_params(meta.config, meta.standardizer, meta.weighting, state.params.clone())?;
        Ok(Self { model, state, train_cfg, data })
    }

    pub fn step(&mut self) -> Result<f64> {
        let Self { model, state, train_cfg, data } = self;
        state.step(|rng| {
            let idx = minibatch(data.len(), train_cfg.batch_size, rng)?;
            let y = data.y.index_select(&idx, 0)?;
            let cond = data.cond.select(&idx)?;
            denoising_loss(model, &y, &cond, &model.weighting, rng)
        })
    }

    /// Step until `train_cfg.steps` have been taken in total.
    pub fn run(&mut self) -> Result<()> {
        while self.state.step < self.train_cfg.steps {
            self.step()?;
        }
        Ok(())
    }

    /// Loss of the EMA model on a fixed draw of `n` items and noise levels from
    /// `examples`, or from the training data when `None`.
    pub fn eval_loss(&self, examples: Option<&[AuxExample]>, n: usize, seed: u64) -> Result<f64> {
        let held;
        let data = match examples {
            Some(ex) => {
                held = AuxData::new(ex, &self.model.cfg, &self.model.standardizer)?;
                &held
            }
            None => &self.data,
        };
        let mut rng = seeded(seed);
        let idx = minibatch(data.len(), n, &mut rng)?;
        let y = data.y.index_select(&idx, 0)?;
        let cond = data.cond.select(&idx)?;
        let model = self.sampling_model()?;
        Ok(denoising_loss(&model, &y, &cond, &model.weighting, &mut rng)?.to_scalar()?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.model.meta()?);
        self.state.write(&mut ckpt)?;
        Ok(ckpt)
    }

    /// The model with EMA weights.
    pub fn sampling_model(&self) -> Result<AuxModel> {
        AuxModel::with_params(self.model.cfg, self.model.standardizer.clone(), self.model.weighting, self.state.ema_params()?)
    }
}

/// Train an auxiliary model for `train_cfg.steps` steps.
pub fn train_aux(examples: &[AuxExample], cfg: AuxModelConfig, train_cfg: TrainConfig, seed: u64) -> Result<AuxTrainer> {
    let mut t = AuxTrainer::new(examples, cfg, train_cfg, seed)?;
    t.run()?;
    Ok(t)
}

/// Euclidean distance of every row to its nearest center, and that center's index.
pub fn nearest_center(rows: &Tensor, centers: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    let c = Tensor::from_vec(centers.concat(), (centers.len(), centers[0].len()), &Device::Cpu)?;
    let d2 = rows.unsqueeze(1)?.broadcast_sub(&c.unsqueeze(0)?)?.sqr()?.sum(D::Minus1)?;
    let d2: Vec<Vec<f64>> = d2.to_vec2()?;
    Ok(d2
        .into_iter()
        .map(|r| {
            let (i, v) = r.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("at least one center");
            (i, v.sqrt())
        })
        .collect())
}

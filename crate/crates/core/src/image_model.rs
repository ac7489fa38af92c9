//! Conditional image denoiser `p(x | y, a)`.
//!
//! The conditioning vector `concat(y, encode(a))` is linearly projected and
//! added to the σ-embedding before it reaches the backbone. The backbone is a
//! small U-Net for images or a residual MLP for flat 2-D data.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    denoising_loss, estimate_sigma_data, noise_embedding, precondition, sample, CondInput, Conditioning, Denoiser,
    LossWeighting, NoiseEmbed, Preconditioned, RawNet, SamplerConfig, ScheduleConfig,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{Builder, Conv2d, GroupNorm, Init, Linear, ParamStore, SelfAttention};
use crate::rng::{seeded, split_seed, NoiseSource, Rng};
use crate::train::{minibatch, TrainConfig, TrainState};

pub const KIND: &str = "image";

/// Width of the learned class-label encoding.
pub const CLASS_ENCODING_WIDTH: usize = 64;

const GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Unet,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Unconditional,
    Embedding,
    ClusterId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondInit {
    Random,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageModelConfig {
    pub backbone: Backbone,
    pub resolution: usize,
    pub channels: usize,
    /// U-Net base channel count, or MLP hidden width.
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    /// Width of the σ-embedding that conditioning is added to.
    pub embed_width: usize,
    /// Residual blocks of the MLP backbone.
    pub mlp_depth: usize,
    pub regime: Regime,
    /// Dimension of `y`; zero in the unconditional regime.
    pub y_dim: usize,
    pub class_count: Option<usize>,
    pub aug_label_dim: usize,
    pub cond_init: CondInit,
}

impl Default for ImageModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Unet,
            resolution: 16,
            channels: 3,
            base_width: 32,
            channel_multipliers: vec![1, 2, 2],
            attention_resolutions: vec![4],
            embed_width: 128,
            mlp_depth: 3,
            regime: Regime::Unconditional,
            y_dim: 0,
            class_count: None,
            aug_label_dim: 0,
            cond_init: CondInit::Random,
        }
    }
}

impl ImageModelConfig {
    /// Flat 2-D data behind the MLP backbone.
    pub fn toy_2d(regime: Regime, y_dim: usize) -> Self {
        Self {
            backbone: Backbone::Mlp,
            resolution: 1,
            channels: 2,
            base_width: 128,
            channel_multipliers: vec![],
            attention_resolutions: vec![],
            embed_width: 64,
            mlp_depth: 3,
            regime,
            y_dim,
            ..Self::default()
        }
    }

    /// Length of `concat(y, encode(a))`.
    pub fn cond_dim(&self) -> usize {
        let y = if self.regime == Regime::Unconditional { 0 } else { self.y_dim };
        y + self.class_count.map_or(0, |_| CLASS_ENCODING_WIDTH)
    }

    /// Per-item data shape.
    pub fn data_shape(&self) -> Vec<usize> {
        match self.backbone {
            Backbone::Unet => vec![self.channels, self.resolution, self.resolution],
            Backbone::Mlp => vec![self.channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 || self.embed_width == 0 {
            return Err(invalid("channels, base_width and embed_width must be positive"));
        }
        if self.embed_width % 2 != 0 {
            return Err(invalid("embed_width must be even"));
        }
        match self.regime {
            Regime::Unconditional if self.y_dim != 0 => {
                return Err(invalid("the unconditional regime takes no y; set y_dim = 0"))
            }
            Regime::Embedding | Regime::ClusterId if self.y_dim == 0 => {
                return Err(invalid("conditional regimes need y_dim > 0"))
            }
            _ => {}
        }
        if self.class_count == Some(0) {
            return Err(invalid("class_count must be positive when set"));
        }
        if self.backbone == Backbone::Unet {
            if !self.resolution.is_power_of_two() {
                return Err(invalid(format!("resolution {} is not a power of two", self.resolution)));
            }
            let levels = self.channel_multipliers.len();
            if levels == 0 || self.channel_multipliers.contains(&0) {
                return Err(invalid("channel_multipliers must be nonempty and positive"));
            }
            if self.resolution >> (levels - 1) == 0 {
                return Err(invalid(format!("resolution {} too small for {levels} levels", self.resolution)));
            }
        }
        Ok(())
    }

    fn level_resolutions(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len()).map(|i| self.resolution >> i).collect()
    }
}

/// Learned projection of the conditioning vector onto the σ-embedding.
#[derive(Clone)]
pub struct CondProjection {
    linear: Linear,
    pub init_mode: CondInit,
}

impl CondProjection {
    pub fn new(b: &mut Builder, cond_dim: usize, embed_width: usize, init_mode: CondInit) -> Result<Self> {
        let linear = match init_mode {
            CondInit::Zero => Linear::with_init(b, cond_dim, embed_width, Init::Zeros)?,
            CondInit::Random => Linear::new(b, cond_dim, embed_width)?,
        };
        Ok(Self { linear, init_mode })
    }

    pub fn forward(&self, c: &Tensor) -> Result<Tensor> {
        self.linear.forward(c)
    }
}

fn down(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

fn up(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?.contiguous()?.reshape((b, c, 2 * h, 2 * w))?)
}

#[derive(Clone)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    emb: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder, in_c: usize, out_c: usize, embed_width: usize) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(&mut b.pp("n1"), in_c, GROUPS)?,
            c1: Conv2d::new(&mut b.pp("c1"), in_c, out_c, 3)?,
            emb: Linear::new(&mut b.pp("emb"), embed_width, out_c)?,
            n2: GroupNorm::new(&mut b.pp("n2"), out_c, GROUPS)?,
            c2: Conv2d::new(&mut b.pp("c2"), out_c, out_c, 3)?,
            skip: if in_c != out_c { Some(Conv2d::new(&mut b.pp("skip"), in_c, out_c, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        let (bsz, c, _, _) = h.dims4()?;
        let h = h.broadcast_add(&self.emb.forward(e)?.reshape((bsz, c, 1, 1))?)?;
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Clone)]
struct AttnBlock {
    norm: GroupNorm,
    attn: SelfAttention,
}

impl AttnBlock {
    fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self { norm: GroupNorm::new(&mut b.pp("norm"), c, GROUPS)?, attn: SelfAttention::new(&mut b.pp("attn"), c, 1)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let t = self.norm.forward(x)?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let y = self.attn.forward(&t)?.transpose(1, 2)?.contiguous()?.reshape((bsz, c, h, w))?;
        Ok((x + y)?)
    }
}

#[derive(Clone)]
struct Level {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

impl Level {
    fn forward(&self, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, e)?;
        match &self.attn {
            Some(a) => a.forward(&h),
            None => Ok(h),
        }
    }
}

#[derive(Clone)]
struct Unet {
    conv_in: Conv2d,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Unet {
    fn new(b: &mut Builder, cfg: &ImageModelConfig) -> Result<Self> {
        let e = cfg.embed_width;
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.base_width).collect();
        let resolutions = cfg.level_resolutions();
        let attn_at = |i: usize, b: &mut Builder, c: usize| -> Result<Option<AttnBlock>> {
            if cfg.attention_resolutions.contains(&resolutions[i]) {
                Ok(Some(AttnBlock::new(b, c)?))
            } else {
                Ok(None)
            }
        };
        let mut down_levels = Vec::new();
        let mut prev = cfg.base_width;
        for (i, &w) in widths.iter().enumerate() {
            let mut lb = b.pp(&format!("down{i}"));
            let res = ResBlock::new(&mut lb.pp("res"), prev, w, e)?;
            let attn = attn_at(i, &mut lb.pp("attn"), w)?;
            down_levels.push(Level { res, attn });
            prev = w;
        }
        let last = *widths.last().expect("validated nonempty");
        let mut up_levels = Vec::new();
        let mut h = last;
        for (i, &w) in widths.iter().enumerate().rev() {
            let mut lb = b.pp(&format!("up{i}"));
            let res = ResBlock::new(&mut lb.pp("res"), h + w, w, e)?;
            let attn = attn_at(i, &mut lb.pp("attn"), w)?;
            up_levels.push(Level { res, attn });
            h = w;
        }
        Ok(Self {
            conv_in: Conv2d::new(&mut b.pp("conv_in"), cfg.channels, cfg.base_width, 3)?,
            down: down_levels,
            mid1: ResBlock::new(&mut b.pp("mid1"), last, last, e)?,
            mid_attn: AttnBlock::new(&mut b.pp("mid_attn"), last)?,
            mid2: ResBlock::new(&mut b.pp("mid2"), last, last, e)?,
            up: up_levels,
            norm_out: GroupNorm::new(&mut b.pp("norm_out"), widths[0], GROUPS)?,
            conv_out: Conv2d::new(&mut b.pp("conv_out"), widths[0], cfg.channels, 3)?,
        })
    }

    fn forward(&self, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        let n = self.down.len();
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(n);
        for (i, level) in self.down.iter().enumerate() {
            h = level.forward(&h, e)?;
            skips.push(h.clone());
            if i + 1 < n {
                h = down(&h)?;
            }
        }
        h = self.mid2.forward(&self.mid_attn.forward(&self.mid1.forward(&h, e)?)?, e)?;
        for (j, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = level.forward(&Tensor::cat(&[&h, &skip], 1)?, e)?;
            if j + 1 < n {
                h = up(&h)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

#[derive(Clone)]
struct MlpBlock {
    fc1: Linear,
    emb: Linear,
    fc2: Linear,
}

#[derive(Clone)]
struct Mlp {
    inp: Linear,
    blocks: Vec<MlpBlock>,
    out: Linear,
}

impl Mlp {
    fn new(b: &mut Builder, cfg: &ImageModelConfig) -> Result<Self> {
        let w = cfg.base_width;
        let blocks = (0..cfg.mlp_depth)
            .map(|i| {
                let mut bb = b.pp(&format!("block{i}"));
                Ok(MlpBlock {
                    fc1: Linear::new(&mut bb.pp("fc1"), w, w)?,
                    emb: Linear::new(&mut bb.pp("emb"), cfg.embed_width, w)?,
                    fc2: Linear::new(&mut bb.pp("fc2"), w, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inp: Linear::new(&mut b.pp("inp"), cfg.channels, w)?, blocks, out: Linear::new(&mut b.pp("out"), w, cfg.channels)? })
    }

    fn forward(&self, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        let mut h = self.inp.forward(x)?;
        for blk in &self.blocks {
            let t = (blk.fc1.forward(&h.silu()?)? + blk.emb.forward(e)?)?;
            h = (h + blk.fc2.forward(&t.silu()?)?)?;
        }
        self.out.forward(&h.silu()?)
    }
}

#[derive(Clone)]
enum BackboneNet {
    Unet(Unet),
    Mlp(Mlp),
}

/// The raw network `F` before preconditioning.
#[derive(Clone)]
pub struct ImageNet {
    cfg: ImageModelConfig,
    sigma: NoiseEmbed,
    class_table: Option<Tensor>,
    proj: Option<CondProjection>,
    aug_map: Option<Linear>,
    backbone: BackboneNet,
}

impl ImageNet {
    pub fn new(b: &mut Builder, cfg: &ImageModelConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_width;
        let class_table = match cfg.class_count {
            Some(n) => Some(b.get("class_table", &[n, CLASS_ENCODING_WIDTH], Init::Normal(1.0))?),
            None => None,
        };
        let proj = match cfg.cond_dim() {
            0 => None,
            d => Some(CondProjection::new(&mut b.pp("cond_proj"), d, e, cfg.cond_init)?),
        };
        let aug_map = if cfg.aug_label_dim > 0 { Some(Linear::no_bias(&mut b.pp("aug_map"), cfg.aug_label_dim, e)?) } else { None };
        let backbone = match cfg.backbone {
            Backbone::Unet => BackboneNet::Unet(Unet::new(&mut b.pp("unet"), cfg)?),
            Backbone::Mlp => BackboneNet::Mlp(Mlp::new(&mut b.pp("mlp"), cfg)?),
        };
        Ok(Self { cfg: cfg.clone(), sigma: noise_embedding(&mut b.pp("sigma"), e)?, class_table, proj, aug_map, backbone })
    }

    pub fn projection(&self) -> Option<&CondProjection> {
        self.proj.as_ref()
    }

    /// `concat(y, encode(a))` for the batch.
    fn cond_vector(&self, cond: &Conditioning, batch: usize) -> Result<Tensor> {
        let mut parts = Vec::new();
        if self.cfg.regime != Regime::Unconditional {
            let y = cond.embedding.as_ref().ok_or_else(|| invalid("this model is conditioned on y but none was given"))?;
            if y.dims() != [batch, self.cfg.y_dim] {
                return Err(invalid(format!("conditioning y has shape {:?}, model expects [{batch}, {}]", y.dims(), self.cfg.y_dim)));
            }
            parts.push(y.clone());
        }
        if let Some(table) = &self.class_table {
            let ids = cond.class.as_ref().ok_or_else(|| invalid("this model is class-conditional but no class was given"))?;
            let n = table.dim(0)?;
            let values: Vec<u32> = ids.to_vec1()?;
            if let Some(bad) = values.iter().find(|&&c| c as usize >= n) {
                return Err(invalid(format!("class id {bad} out of range for {n} classes")));
            }
            parts.push(table.index_select(ids, 0)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

impl RawNet for ImageNet {
    fn forward(&self, x_in: &Tensor, c_noise: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let batch = x_in.dim(0)?;
        if x_in.dims()[1..] != self.cfg.data_shape()[..] {
            return Err(invalid(format!("input shape {:?}, model expects [_, {:?}]", x_in.dims(), self.cfg.data_shape())));
        }
        let mut temb = self.sigma.forward(c_noise)?;
        if let Some(p) = &self.proj {
            temb = (temb + p.forward(&self.cond_vector(cond, batch)?)?)?;
        }
        if let (Some(m), Some(label)) = (&self.aug_map, &cond.aug) {
            temb = (temb + m.forward(label)?)?;
        }
        let e = temb.silu()?;
        match &self.backbone {
            BackboneNet::Unet(u) => u.forward(x_in, &e),
            BackboneNet::Mlp(m) => m.forward(x_in, &e),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    kind: String,
    config: ImageModelConfig,
    weighting: LossWeighting,
}

/// A preconditioned image denoiser and its parameters.
#[derive(Clone)]
pub struct ImageModel {
    pub cfg: ImageModelConfig,
    pub weighting: LossWeighting,
    pub params: ParamStore,
    net: std::sync::Arc<Preconditioned<ImageNet>>,
}

impl ImageModel {
    pub fn new(cfg: ImageModelConfig, sigma_data: f64, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = ImageNet::new(&mut params.builder(rng), &cfg)?;
        let weighting = LossWeighting { sigma_data, ..LossWeighting::default() };
        Ok(Self { cfg, weighting, params, net: std::sync::Arc::new(precondition(net, sigma_data)?) })
    }

    /// Rebuild around existing weights; every parameter must be present with
    /// the expected shape and no extra ones may remain.
    pub fn with_params(cfg: ImageModelConfig, weighting: LossWeighting, params: ParamStore) -> Result<Self> {
        let mut probe = params.clone();
        let before = probe.len();
        let net = ImageNet::new(&mut probe.builder(&mut seeded(0)), &cfg)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("image model: {e}")))?;
        if probe.len() != before {
            return Err(Error::IncompatibleCheckpoint(format!(
                "image model expects {} parameter tensors, checkpoint has {before}",
                probe.len()
            )));
        }
        Ok(Self { cfg, weighting, params, net: std::sync::Arc::new(precondition(net, weighting.sigma_data)?) })
    }

    pub fn sigma_data(&self) -> f64 {
        self.weighting.sigma_data
    }

    pub fn net(&self) -> &ImageNet {
        &self.net.net
    }

    /// Predicted clean batch. `y` is ignored in the unconditional regime.
    pub fn image_denoise(&self, x_sigma: &Tensor, sigma: &Tensor, y: Option<&Tensor>, a: &[CondInput]) -> Result<Tensor> {
        let cond = Conditioning { embedding: y.cloned(), class: CondInput::batch_classes(a)?, aug: None };
        self.denoise(x_sigma, sigma, &cond)
    }

    /// Draw `count` items under `cond`. Augmentation labels are left unset,
    /// which is the no-augmentation condition.
    pub fn sample_images(
        &self,
        cond: &Conditioning,
        count: usize,
        sampler: &SamplerConfig,
        schedule: &ScheduleConfig,
        noise: &mut dyn NoiseSource,
    ) -> Result<Tensor> {
        let mut shape = vec![count];
        shape.extend(self.cfg.data_shape());
        let cond = Conditioning { aug: None, ..cond.clone() };
        sample(self, &cond, &shape, sampler, schedule, noise)
    }

    fn meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(ImageMeta { kind: KIND.into(), config: self.cfg.clone(), weighting: self.weighting })?)
    }

    fn read_meta(ckpt: &Checkpoint) -> Result<ImageMeta> {
        let meta: ImageMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("not an image-model checkpoint: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::IncompatibleCheckpoint(format!("expected a {KIND} checkpoint, found {}", meta.kind)));
        }
        Ok(meta)
    }

    /// Sampling model from a checkpoint's EMA weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = Self::read_meta(ckpt)?;
        Self::with_params(meta.config, meta.weighting, ParamStore::from_tensors(&ckpt.group("ema"))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Denoiser for ImageModel {
    fn denoise(&self, x_sigma: &Tensor, sigma: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.net.denoise(x_sigma, sigma, cond)
    }
}

/// Add a zero-initialized conditioning projection of width `cond_dim` to an
/// unconditional model. The result computes exactly the base function for any
/// `y` until it is trained.
pub fn attach_zero_init_conditioning(base: &ImageModel, cond_dim: usize) -> Result<ImageModel> {
    if base.cfg.regime != Regime::Unconditional || base.cfg.cond_dim() != 0 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "base model must be unconditional without class labels, found regime {:?} with cond_dim {}",
            base.cfg.regime,
            base.cfg.cond_dim()
        )));
    }
    if cond_dim == 0 {
        return Err(invalid("cond_dim must be positive"));
    }
    // Rebuilding the base config first checks the weights match its architecture.
    ImageModel::with_params(base.cfg.clone(), base.weighting, base.params.clone())?;
    let cfg = ImageModelConfig { regime: Regime::Embedding, y_dim: cond_dim, cond_init: CondInit::Zero, ..base.cfg.clone() };
    let mut params = ParamStore::from_tensors(&base.params.snapshot()?)?;
    let net = ImageNet::new(&mut params.builder(&mut seeded(0)), &cfg)?;
    Ok(ImageModel { cfg, weighting: base.weighting, params, net: std::sync::Arc::new(precondition(net, base.weighting.sigma_data)?) })
}

/// One training item: data in the model's per-item shape (flattened), its
/// embedding (ignored in the unconditional regime), light conditioning, and the
/// encoded augmentation label (empty when unused).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageExample {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub cond: CondInput,
    pub aug: Vec<f64>,
}

struct ImageData {
    x: Tensor,
    cond: Conditioning,
}

impl ImageData {
    fn new(examples: &[ImageExample], cfg: &ImageModelConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(invalid("image training set is empty"));
        }
        let n = examples.len();
        let shape = cfg.data_shape();
        let per: usize = shape.iter().product();
        let conditional = cfg.regime != Regime::Unconditional;
        let mut xs = Vec::with_capacity(n * per);
        let mut ys = Vec::new();
        let mut aug = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != per {
                return Err(invalid(format!("example {i} has {} values, expected {per}", ex.x.len())));
            }
            xs.extend_from_slice(&ex.x);
            if conditional {
                let y = ex.y.as_ref().ok_or_else(|| invalid(format!("example {i} has no embedding")))?;
                if y.len() != cfg.y_dim {
                    return Err(invalid(format!("example {i} has y of dimension {}, expected {}", y.len(), cfg.y_dim)));
                }
                ys.extend_from_slice(y);
            }
            if ex.aug.len() != cfg.aug_label_dim {
                return Err(invalid(format!("example {i} has {} label entries, expected {}", ex.aug.len(), cfg.aug_label_dim)));
            }
            aug.extend_from_slice(&ex.aug);
        }
        let conds: Vec<CondInput> = examples.iter().map(|e| e.cond).collect();
        let class = CondInput::batch_classes(&conds)?;
        if class.is_some() != cfg.class_count.is_some() {
            return Err(invalid("class labels must be present exactly when the model has class_count"));
        }
        let dev = Device::Cpu;
        let mut full = vec![n];
        full.extend(shape);
        Ok(Self {
            x: Tensor::from_vec(xs, full, &dev)?,
            cond: Conditioning {
                embedding: if conditional { Some(Tensor::from_vec(ys, (n, cfg.y_dim), &dev)?) } else { None },
                class,
                aug: if cfg.aug_label_dim > 0 { Some(Tensor::from_vec(aug, (n, cfg.aug_label_dim), &dev)?) } else { None },
            },
        })
    }

    fn len(&self) -> usize {
        self.x.dim(0).unwrap_or(0)
    }

    fn rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.x.flatten_from(1)?.to_vec2()?)
    }
}

/// Live image-model training run.
pub struct ImageTrainer {
    pub model: ImageModel,
    pub state: TrainState,
    pub train_cfg: TrainConfig,
    data: ImageData,
}

impl ImageTrainer {
    /// `sigma_data` defaults to the pooled standard deviation of the data.
    /// Parameters come from child seed 0 of `seed`, minibatches and noise from
    /// child seed 1.
    pub fn new(examples: &[ImageExample], cfg: ImageModelConfig, train_cfg: TrainConfig, sigma_data: Option<f64>, seed: u64) -> Result<Self> {
        let data = ImageData::new(examples, &cfg)?;
        let sigma_data = match sigma_data {
            Some(s) => s,
            None => estimate_sigma_data(&data.rows()?)?,
        };
        let model = ImageModel::new(cfg, sigma_data, &mut seeded(split_seed(seed, 0)))?;
        let state = TrainState::new(model.params.clone(), &train_cfg, seeded(split_seed(seed, 1)))?;
        Ok(Self { model, state, train_cfg, data })
    }

    /// Continue training all parameters of `base` after attaching a
    /// zero-initialized projection for `y` of width `y_dim`.
    pub fn finetune(examples: &[ImageExample], base: &ImageModel, y_dim: usize, train_cfg: TrainConfig, seed: u64) -> Result<Self> {
        let model = attach_zero_init_conditioning(base, y_dim)?;
        let data = ImageData::new(examples, &model.cfg)?;
        let state = TrainState::new(model.params.clone(), &train_cfg, seeded(split_seed(seed, 1)))?;
        Ok(Self { model, state, train_cfg, data })
    }

    pub fn resume(examples: &[ImageExample], ckpt: &Checkpoint, train_cfg: TrainConfig) -> Result<Self> {
        let meta = ImageModel::read_meta(ckpt)?;
        let data = ImageData::new(examples, &meta.config)?;
        let mut params = ParamStore::new();
        ImageNet::new(&mut params.builder(&mut seeded(0)), &meta.config)?;
        let state = TrainState::read(ckpt, params)?;
        let model = ImageModel::with_params(meta.config, meta.weighting, state.params.clone())?;
        Ok(Self { model, state, train_cfg, data })
    }

    pub fn step(&mut self) -> Result<f64> {
        let Self { model, state, train_cfg, data } = self;
        let model: &ImageModel = model;
        state.step(|rng| {
            let idx = minibatch(data.len(), train_cfg.batch_size, rng)?;
            let x = data.x.index_select(&idx, 0)?;
            let cond = data.cond.select(&idx)?;
            denoising_loss(model, &x, &cond, &model.weighting, rng)
        })
    }

    pub fn run(&mut self) -> Result<()> {
        while self.state.step < self.train_cfg.steps {
            self.step()?;
        }
        Ok(())
    }

    /// Loss of the EMA model on a fixed draw of `n` items and noise levels from
    /// `examples`, or from the training data when `None`.
    pub fn eval_loss(&self, examples: Option<&[ImageExample]>, n: usize, seed: u64) -> Result<f64> {
        let held;
        let data = match examples {
            Some(ex) => {
                held = ImageData::new(ex, &self.model.cfg)?;
                &held
            }
            None => &self.data,
        };
        let mut rng = seeded(seed);
        let idx = minibatch(data.len(), n, &mut rng)?;
        let x = data.x.index_select(&idx, 0)?;
        let cond = data.cond.select(&idx)?;
        let model = self.sampling_model()?;
        Ok(denoising_loss(&model, &x, &cond, &model.weighting, &mut rng)?.to_scalar()?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.model.meta()?);
        self.state.write(&mut ckpt)?;
        Ok(ckpt)
    }

    pub fn sampling_model(&self) -> Result<ImageModel> {
        ImageModel::with_params(self.model.cfg.clone(), self.model.weighting, self.state.ema_params()?)
    }
}

/// Train an image model for `train_cfg.steps` steps.
pub fn train_image_model(
    examples: &[ImageExample],
    cfg: ImageModelConfig,
    train_cfg: TrainConfig,
    seed: u64,
) -> Result<ImageTrainer> {
    let mut t = ImageTrainer::new(examples, cfg, train_cfg, None, seed)?;
    t.run()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;

    fn unet_cfg() -> ImageModelConfig {
        ImageModelConfig {
            resolution: 8,
            base_width: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![4],
            embed_width: 16,
            ..ImageModelConfig::default()
        }
    }

    fn noisy(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(normal_vec(&mut seeded(seed), n), shape, &Device::Cpu).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn unet_output_matches_input_shape() {
        let m = ImageModel::new(unet_cfg(), 0.5, &mut seeded(0)).unwrap();
        for b in [1, 4] {
            let x = noisy(&[b, 3, 8, 8], b as u64);
            let s = Tensor::full(1.0f64, b, &Device::Cpu).unwrap();
            assert_eq!(m.image_denoise(&x, &s, None, &vec![CondInput::Null; b]).unwrap().dims(), &[b, 3, 8, 8]);
        }
    }

    #[test]
    fn down_up_are_pooling_and_nearest() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let d: Vec<f64> = down(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(d, vec![2.5, 4.5, 10.5, 12.5]);
        let u: Vec<f64> = up(&down(&x).unwrap()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(&u[..4], &[2.5, 2.5, 4.5, 4.5]);
    }

    #[test]
    fn cond_dim_mismatch_is_rejected() {
        let cfg = ImageModelConfig { regime: Regime::Embedding, y_dim: 5, ..unet_cfg() };
        let m = ImageModel::new(cfg, 0.5, &mut seeded(0)).unwrap();
        let x = noisy(&[2, 3, 8, 8], 0);
        let s = Tensor::full(1.0f64, 2, &Device::Cpu).unwrap();
        let y = noisy(&[2, 4], 1);
        assert!(matches!(m.image_denoise(&x, &s, Some(&y), &[CondInput::Null; 2]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_init_projection_is_exact_noop() {
        let base = ImageModel::new(unet_cfg(), 0.5, &mut seeded(1)).unwrap();
        let cond = attach_zero_init_conditioning(&base, 6).unwrap();
        assert_eq!(cond.params.num_params(), base.params.num_params() + 6 * 16 + 16);
        assert_eq!(cond.net().projection().unwrap().init_mode, CondInit::Zero);
        let x = noisy(&[3, 3, 8, 8], 2);
        let s = Tensor::new(&[0.01f64, 1.0, 50.0], &Device::Cpu).unwrap();
        let want = base.image_denoise(&x, &s, None, &[CondInput::Null; 3]).unwrap();
        for seed in 0..3 {
            let y = (noisy(&[3, 6], 10 + seed) * 100.0).unwrap();
            let got = cond.image_denoise(&x, &s, Some(&y), &[CondInput::Null; 3]).unwrap();
            assert_eq!(bits(&got), bits(&want));
        }
    }

    #[test]
    fn attach_rejects_conditional_base() {
        let cfg = ImageModelConfig::toy_2d(Regime::Embedding, 3);
        let base = ImageModel::new(cfg, 1.0, &mut seeded(0)).unwrap();
        assert!(matches!(attach_zero_init_conditioning(&base, 3), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn unconditional_regime_ignores_y() {
        let m = ImageModel::new(ImageModelConfig::toy_2d(Regime::Unconditional, 0), 1.0, &mut seeded(0)).unwrap();
        let x = noisy(&[4, 2], 0);
        let y = noisy(&[4, 3], 1);
        let shuffled = y.index_select(&Tensor::new(&[3u32, 2, 1, 0], &Device::Cpu).unwrap(), 0).unwrap();
        let w = LossWeighting::default();
        let l1 = denoising_loss(&m, &x, &Conditioning { embedding: Some(y), ..Conditioning::none() }, &w, &mut seeded(5)).unwrap();
        let l2 = denoising_loss(&m, &x, &Conditioning { embedding: Some(shuffled), ..Conditioning::none() }, &w, &mut seeded(5)).unwrap();
        assert_eq!(l1.to_scalar::<f64>().unwrap().to_bits(), l2.to_scalar::<f64>().unwrap().to_bits());
    }

    #[test]
    fn zero_aug_label_matches_absent_label() {
        let cfg = ImageModelConfig { aug_label_dim: 4, ..ImageModelConfig::toy_2d(Regime::Unconditional, 0) };
        let m = ImageModel::new(cfg, 1.0, &mut seeded(0)).unwrap();
        let x = noisy(&[2, 2], 0);
        let s = Tensor::new(&[0.5f64, 3.0], &Device::Cpu).unwrap();
        let zero = Tensor::zeros((2, 4), crate::nn::DTYPE, &Device::Cpu).unwrap();
        let a = m.denoise(&x, &s, &Conditioning { aug: Some(zero), ..Conditioning::none() }).unwrap();
        let b = m.denoise(&x, &s, &Conditioning::none()).unwrap();
        let diff: f64 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn class_regime_uses_the_class_table() {
        let cfg = ImageModelConfig { class_count: Some(3), ..ImageModelConfig::toy_2d(Regime::Unconditional, 0) };
        assert_eq!(cfg.cond_dim(), CLASS_ENCODING_WIDTH);
        let m = ImageModel::new(cfg, 1.0, &mut seeded(0)).unwrap();
        let x = noisy(&[1, 2], 0);
        let s = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let a = m.image_denoise(&x, &s, None, &[CondInput::Class(0)]).unwrap();
        let b = m.image_denoise(&x, &s, None, &[CondInput::Class(2)]).unwrap();
        assert_ne!(bits(&a), bits(&b));
        assert!(m.image_denoise(&x, &s, None, &[CondInput::Class(3)]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let examples: Vec<ImageExample> =
            (0..4).map(|i| ImageExample { x: normal_vec(&mut seeded(i), 2), y: None, cond: CondInput::Null, aug: vec![] }).collect();
        let t = train_image_model(&examples, ImageModelConfig::toy_2d(Regime::Unconditional, 0), TrainConfig { steps: 2, batch_size: 2, ..Default::default() }, 0).unwrap();
        let loaded = ImageModel::from_checkpoint(&t.checkpoint().unwrap()).unwrap();
        let x = noisy(&[2, 2], 3);
        let s = Tensor::new(&[0.2f64, 4.0], &Device::Cpu).unwrap();
        let a = t.sampling_model().unwrap().denoise(&x, &s, &Conditioning::none()).unwrap();
        assert_eq!(bits(&a), bits(&loaded.denoise(&x, &s, &Conditioning::none()).unwrap()));
    }
}

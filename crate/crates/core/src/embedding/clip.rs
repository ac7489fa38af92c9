//! CLIP image tower (ViT-B/32 layout) over externally supplied weights.
//!
//! Weights are read from a safetensors file using the tensor names of the
//! Hugging Face `openai/clip-vit-base-patch32` export. Nothing is downloaded:
//! when no weights are configured the embedder reports itself unavailable and
//! callers must choose the proxy backend explicitly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use image::imageops::FilterType;

use super::{Embedder, Embedding, SourceTag};
use crate::data::Image;
use crate::error::{invalid, Error, Result};
use crate::nn::softmax_last;

pub const CLIP_WEIGHTS_ENV: &str = "VCDM_CLIP_WEIGHTS";

const MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipVisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub projection_dim: usize,
}

impl ClipVisionConfig {
    pub fn vit_b32() -> Self {
        Self { image_size: 224, patch_size: 32, width: 768, layers: 12, heads: 12, mlp_dim: 3072, projection_dim: 512 }
    }

    fn num_positions(&self) -> usize {
        (self.image_size / self.patch_size).pow(2) + 1
    }
}

pub struct ClipEmbedder {
    cfg: ClipVisionConfig,
    weights: HashMap<String, Tensor>,
}

impl std::fmt::Debug for ClipEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClipEmbedder").field("cfg", &self.cfg).finish()
    }
}

impl ClipEmbedder {
    /// Load ViT-B/32 weights from the path in `VCDM_CLIP_WEIGHTS`.
    pub fn from_env() -> Result<Self> {
        let path = std::env::var_os(CLIP_WEIGHTS_ENV).map(PathBuf::from).ok_or_else(|| {
            Error::BackendUnavailable(format!(
                "CLIP weights not configured; set {CLIP_WEIGHTS_ENV} to a ViT-B/32 safetensors file or select the proxy embedder"
            ))
        })?;
        Self::load(&path, ClipVisionConfig::vit_b32())
    }

    pub fn load(path: &Path, cfg: ClipVisionConfig) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::BackendUnavailable(format!(
                "CLIP weights file {} not found; select the proxy embedder instead",
                path.display()
            )));
        }
        let raw = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut weights = HashMap::with_capacity(raw.len());
        for (k, v) in raw {
            weights.insert(k, v.to_dtype(DType::F64)?);
        }
        let me = Self { cfg, weights };
        me.validate()?;
        Ok(me)
    }

    fn w(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::BackendUnavailable(format!("CLIP weights missing tensor {name}")))
    }

    fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let t = self.w(name)?;
            if t.dims() != shape {
                return Err(Error::BackendUnavailable(format!("CLIP tensor {name} has shape {:?}, expected {shape:?}", t.dims())));
            }
            Ok(())
        };
        expect("vision_model.embeddings.patch_embedding.weight", &[c.width, 3, c.patch_size, c.patch_size])?;
        expect("vision_model.embeddings.class_embedding", &[c.width])?;
        expect("vision_model.embeddings.position_embedding.weight", &[c.num_positions(), c.width])?;
        expect("visual_projection.weight", &[c.projection_dim, c.width])?;
        for i in 0..c.layers {
            expect(&format!("vision_model.encoder.layers.{i}.mlp.fc1.weight"), &[c.mlp_dim, c.width])?;
        }
        Ok(())
    }

    fn linear(&self, x: &Tensor, prefix: &str, bias: bool) -> Result<Tensor> {
        let w = self.w(&format!("{prefix}.weight"))?;
        let y = x.broadcast_matmul(&w.t()?)?;
        if bias {
            Ok(y.broadcast_add(self.w(&format!("{prefix}.bias"))?)?)
        } else {
            Ok(y)
        }
    }

    fn layer_norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(self.w(&format!("{prefix}.weight"))?)?.broadcast_add(self.w(&format!("{prefix}.bias"))?)?)
    }

    fn attention(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let (b, t, width) = x.dims3()?;
        let h = self.cfg.heads;
        let hd = width / h;
        let proj = |name: &str| -> Result<Tensor> {
            Ok(self.linear(x, &format!("{prefix}.{name}"), true)?.reshape((b, t, h, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = (proj("q_proj")? * (hd as f64).powf(-0.5))?;
        let (k, v) = (proj("k_proj")?, proj("v_proj")?);
        let att = softmax_last(&q.matmul(&k.t()?.contiguous()?)?)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, width))?;
        self.linear(&y, &format!("{prefix}.out_proj"), true)
    }

    /// Resize the short side to the model resolution, center-crop, and
    /// normalize with the CLIP channel statistics.
    fn preprocess(&self, image: &Image) -> Result<Tensor> {
        if image.channels != 3 {
            return Err(invalid(format!("CLIP expects RGB input, got {} channels", image.channels)));
        }
        let size = self.cfg.image_size as u32;
        let mut buf = image::Rgb32FImage::new(image.width as u32, image.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = image.at(c, y as usize, x as usize) as f32;
            }
        }
        let (w, h) = (image.width as f64, image.height as f64);
        let scale = size as f64 / w.min(h);
        let (nw, nh) = (((w * scale).round() as u32).max(size), ((h * scale).round() as u32).max(size));
        let resized = image::imageops::resize(&buf, nw, nh, FilterType::CatmullRom);
        let (ox, oy) = ((nw - size) / 2, (nh - size) / 2);
        let s = size as usize;
        let mut data = vec![0.0; 3 * s * s];
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let v = resized.get_pixel(ox + x as u32, oy + y as u32).0[c] as f64;
                    data[(c * s + y) * s + x] = (v - MEAN[c]) / STD[c];
                }
            }
        }
        Ok(Tensor::from_vec(data, (1, 3, s, s), &Device::Cpu)?)
    }

    fn forward(&self, pixels: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let patches = pixels.conv2d(self.w("vision_model.embeddings.patch_embedding.weight")?, 0, c.patch_size, 1, 1)?;
        let b = patches.dim(0)?;
        let patches = patches.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.w("vision_model.embeddings.class_embedding")?.reshape((1, 1, c.width))?.broadcast_as((b, 1, c.width))?;
        let tokens = Tensor::cat(&[cls.contiguous()?, patches.contiguous()?], 1)?;
        let mut x = tokens.broadcast_add(self.w("vision_model.embeddings.position_embedding.weight")?)?;
        x = self.layer_norm(&x, "vision_model.pre_layrnorm")?;
        for i in 0..c.layers {
            let p = format!("vision_model.encoder.layers.{i}");
            x = (&x + self.attention(&self.layer_norm(&x, &format!("{p}.layer_norm1"))?, &format!("{p}.self_attn"))?)?;
            let h = self.linear(&self.layer_norm(&x, &format!("{p}.layer_norm2"))?, &format!("{p}.mlp.fc1"), true)?;
            let h = (&h * sigmoid(&(&h * 1.702)?)?)?;
            x = (&x + self.linear(&h, &format!("{p}.mlp.fc2"), true)?)?;
        }
        let pooled = self.layer_norm(&x.narrow(1, 0, 1)?.squeeze(1)?, "vision_model.post_layernorm")?;
        self.linear(&pooled, "visual_projection", false)
    }
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

impl Embedder for ClipEmbedder {
    fn dim(&self) -> usize {
        self.cfg.projection_dim
    }

    fn tag(&self) -> SourceTag {
        SourceTag::ClipVitB32
    }

    fn embed(&self, image: &Image) -> Result<Embedding> {
        let out = self.forward(&self.preprocess(image)?)?;
        Embedding::new(out.flatten_all()?.to_vec1()?, SourceTag::ClipVitB32)
    }
}

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::embedding::{Embedder, Embedding};
use crate::error::{invalid, Result};
use crate::rng::Rng;

pub const AUG_OPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugOp {
    HFlip,
    Rotation,
    Brightness,
    Contrast,
}

impl AugOp {
    pub const ALL: [AugOp; AUG_OPS] = [AugOp::HFlip, AugOp::Rotation, AugOp::Brightness, AugOp::Contrast];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Independent application probability of each op.
    pub probability: f64,
    pub max_rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Magnitude buckets per op; must be even so no bucket sits at zero.
    pub buckets: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { probability: 0.5, max_rotation_deg: 15.0, brightness: 0.2, contrast: 0.2, buckets: 8 }
    }
}

/// Which ops were applied and at which magnitude bucket. Encodes to a vector
/// with one signed coordinate per op; an op that was not applied contributes 0,
/// so the all-zeros vector means "no augmentation".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AugmentationLabel {
    pub applied: [bool; AUG_OPS],
    pub buckets: [u8; AUG_OPS],
}

impl AugmentationLabel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        !self.applied.iter().any(|&a| a)
    }

    /// Bucket `b` of `n` maps to the center `(2b + 1)/n − 1` of its slice of (−1, 1).
    fn level(bucket: u8, n: u8) -> f64 {
        (2.0 * bucket as f64 + 1.0) / n as f64 - 1.0
    }

    pub fn encode(&self, buckets: u8) -> Vec<f64> {
        (0..AUG_OPS)
            .map(|i| match (self.applied[i], AugOp::ALL[i]) {
                (false, _) => 0.0,
                (true, AugOp::HFlip) => 1.0,
                (true, _) => Self::level(self.buckets[i], buckets),
            })
            .collect()
    }

    pub fn decode(v: &[f64], buckets: u8) -> Result<Self> {
        if v.len() != AUG_OPS {
            return Err(invalid(format!("augmentation label has {} entries, expected {AUG_OPS}", v.len())));
        }
        let mut out = Self::none();
        for (i, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            out.applied[i] = true;
            if AugOp::ALL[i] != AugOp::HFlip {
                let b = ((x + 1.0) / 2.0 * buckets as f64 - 0.5).round();
                out.buckets[i] = b.clamp(0.0, (buckets - 1) as f64) as u8;
            }
        }
        Ok(out)
    }
}

pub fn sample_ops(cfg: &AugmentConfig, rng: &mut Rng) -> AugmentationLabel {
    let mut label = AugmentationLabel::none();
    for i in 0..AUG_OPS {
        // Always draw both numbers so the stream position does not depend on outcomes.
        let coin = rng.random::<f64>();
        let bucket = rng.random_range(0..cfg.buckets.max(2));
        if coin < cfg.probability {
            label.applied[i] = true;
            if AugOp::ALL[i] != AugOp::HFlip {
                label.buckets[i] = bucket;
            }
        }
    }
    label
}

/// Apply the ops recorded in `label`, in the fixed order flip, rotate, brightness, contrast.
pub fn apply_ops(image: &Image, label: &AugmentationLabel, cfg: &AugmentConfig) -> Image {
    let n = cfg.buckets.max(2);
    let mut out = image.clone();
    if label.applied[0] {
        out = out.hflip();
    }
    if label.applied[1] {
        out = rotate(&out, AugmentationLabel::level(label.buckets[1], n) * cfg.max_rotation_deg);
    }
    if label.applied[2] {
        let delta = AugmentationLabel::level(label.buckets[2], n) * cfg.brightness;
        out.data.iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
    }
    if label.applied[3] {
        let factor = 1.0 + AugmentationLabel::level(label.buckets[3], n) * cfg.contrast;
        let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
        out.data.iter_mut().for_each(|v| *v = (mean + (*v - mean) * factor).clamp(0.0, 1.0));
    }
    out
}

/// Bilinear rotation about the image center with edge replication.
fn rotate(image: &Image, degrees: f64) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((image.height as f64 - 1.0) / 2.0, (image.width as f64 - 1.0) / 2.0);
    let mut out = image.clone();
    let clampi = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    for y in 0..image.height {
        for x in 0..image.width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = clampi(cy + c * dy - s * dx, image.height);
            let sx = clampi(cx + s * dy + c * dx, image.width);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(image.height - 1), (x0 + 1).min(image.width - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..image.channels {
                let top = image.at(ch, y0, x0) * (1.0 - fx) + image.at(ch, y0, x1) * fx;
                let bot = image.at(ch, y1, x0) * (1.0 - fx) + image.at(ch, y1, x1) * fx;
                *out.at_mut(ch, y, x) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn augment(image: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> (Image, AugmentationLabel) {
    let label = sample_ops(cfg, rng);
    (apply_ops(image, &label, cfg), label)
}

/// Embed the augmented image (never the original) and return its label.
pub fn augmented_embedding(
    image: &Image,
    cfg: &AugmentConfig,
    rng: &mut Rng,
    embedder: &dyn Embedder,
) -> Result<(Embedding, AugmentationLabel)> {
    let (aug, label) = augment(image, cfg, rng);
    Ok((embedder.embed(&aug)?, label))
}

use nalgebra::{DMatrix, DVector};

use super::{Embedder, Embedding, SourceTag};
use crate::data::Image;
use crate::error::{invalid, Result};
use crate::rng::{normal_vec, seeded};

/// Offline stand-in for a pretrained image embedder: per-patch mean and
/// standard deviation of each channel on a `grid × grid` layout, mapped through
/// a fixed-seed random orthogonal projection. No training, no external weights.
#[derive(Debug, Clone)]
pub struct ProxyEmbedder {
    dim: usize,
    channels: usize,
    grid: usize,
    projection: DMatrix<f64>,
}

impl ProxyEmbedder {
    pub const DEFAULT_DIM: usize = 64;
    pub const DEFAULT_GRID: usize = 4;
    pub const DEFAULT_SEED: u64 = 0x5eed_0e4b;

    pub fn new(dim: usize, channels: usize) -> Result<Self> {
        Self::with_layout(dim, channels, Self::DEFAULT_GRID, Self::DEFAULT_SEED)
    }

    pub fn with_layout(dim: usize, channels: usize, grid: usize, seed: u64) -> Result<Self> {
        if dim == 0 || channels == 0 || grid == 0 {
            return Err(invalid("proxy embedder needs positive dim, channels and grid"));
        }
        let features = channels * grid * grid * 2;
        let mut rng = seeded(seed);
        let (rows, cols) = (dim.max(features), dim.min(features));
        let gauss = DMatrix::from_vec(rows, cols, normal_vec(&mut rng, rows * cols));
        let q = gauss.qr().q();
        // Orthonormal rows when compressing, orthonormal columns when expanding.
        let projection = if dim <= features { q.transpose() } else { q };
        Ok(Self { dim, channels, grid, projection })
    }

    fn patch_stats(&self, image: &Image) -> Result<DVector<f64>> {
        if image.channels != self.channels {
            return Err(invalid(format!("proxy embedder expects {} channels, got {}", self.channels, image.channels)));
        }
        if image.height < self.grid || image.width < self.grid {
            return Err(invalid(format!(
                "image {}x{} smaller than the {}x{} patch grid",
                image.height, image.width, self.grid, self.grid
            )));
        }
        let g = self.grid;
        let mut feats = Vec::with_capacity(self.channels * g * g * 2);
        for c in 0..self.channels {
            for py in 0..g {
                let (y0, y1) = (py * image.height / g, (py + 1) * image.height / g);
                for px in 0..g {
                    let (x0, x1) = (px * image.width / g, (px + 1) * image.width / g);
                    let n = ((y1 - y0) * (x1 - x0)) as f64;
                    let (mut s, mut ss) = (0.0, 0.0);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = image.at(c, y, x);
                            s += v;
                            ss += v * v;
                        }
                    }
                    let mean = s / n;
                    let var = (ss / n - mean * mean).max(0.0);
                    feats.push(mean - 0.5);
                    feats.push(var.sqrt());
                }
            }
        }
        Ok(DVector::from_vec(feats))
    }
}

impl Embedder for ProxyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> SourceTag {
        SourceTag::Proxy
    }

    fn embed(&self, image: &Image) -> Result<Embedding> {
        let f = self.patch_stats(image)?;
        let y = &self.projection * f;
        Embedding::new(y.iter().copied().collect(), SourceTag::Proxy)
    }
}

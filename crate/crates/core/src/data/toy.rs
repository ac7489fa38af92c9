//! Synthetic datasets for desk-scale experiments: the 2-D Gaussian ring with
//! paired proxy embeddings, and a small labelled image set for exercising the
//! image path end to end.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::embedding::{Embedding, SourceTag};
use crate::rng::{normal_vec, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingConfig {
    pub modes: usize,
    pub radius: f64,
    pub mode_std: f64,
    /// Per-coordinate noise added to each one-hot mode embedding.
    pub embed_noise: f64,
    pub count: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self { modes: 8, radius: 2.0, mode_std: 0.1, embed_noise: 0.05, count: 4096 }
    }
}

#[derive(Debug, Clone)]
pub struct RingDataset {
    pub points: Vec<[f64; 2]>,
    pub modes: Vec<usize>,
    pub embeddings: Vec<Embedding>,
}

impl RingConfig {
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.modes)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / self.modes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    pub fn generate(&self, rng: &mut Rng) -> RingDataset {
        self.generate_n(self.count, rng)
    }

    pub fn generate_n(&self, n: usize, rng: &mut Rng) -> RingDataset {
        let centers = self.centers();
        let mut points = Vec::with_capacity(n);
        let mut modes = Vec::with_capacity(n);
        let mut embeddings = Vec::with_capacity(n);
        for _ in 0..n {
            let m = rng.random_range(0..self.modes);
            let z = normal_vec(rng, 2);
            points.push([centers[m][0] + self.mode_std * z[0], centers[m][1] + self.mode_std * z[1]]);
            let mut y: Vec<f64> = normal_vec(rng, self.modes).into_iter().map(|e| e * self.embed_noise).collect();
            y[m] += 1.0;
            embeddings.push(Embedding { values: y, source: SourceTag::Proxy });
            modes.push(m);
        }
        RingDataset { points, modes, embeddings }
    }
}

impl RingDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }
}

/// Labelled synthetic images: each class is a colored square at a
/// class-specific location over a dim background, with positional jitter.
pub fn synthetic_images(n: usize, size: usize, classes: usize, rng: &mut Rng) -> Vec<(Image, u32)> {
    let palette = [[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9], [0.9, 0.8, 0.2], [0.8, 0.3, 0.8], [0.2, 0.8, 0.8]];
    let classes = classes.max(1);
    let side = (size / 3).max(1);
    (0..n)
        .map(|_| {
            let class = rng.random_range(0..classes);
            let mut img = Image::filled(3, size, size, 0.1);
            let slot = class % 4;
            let base_y = if slot / 2 == 0 { size / 8 } else { size / 2 };
            let base_x = if slot % 2 == 0 { size / 8 } else { size / 2 };
            let jy = rng.random_range(0..=size / 8);
            let jx = rng.random_range(0..=size / 8);
            let shade = rng.random_range(0.8..1.0);
            let color = palette[class % palette.len()];
            for y in (base_y + jy)..(base_y + jy + side).min(size) {
                for x in (base_x + jx)..(base_x + jx + side).min(size) {
                    for (c, v) in color.iter().enumerate() {
                        *img.at_mut(c, y, x) = v * shade;
                    }
                }
            }
            (img, class as u32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn ring_points_sit_near_their_centers() {
        let cfg = RingConfig::default();
        let data = cfg.generate_n(2000, &mut seeded(0));
        let centers = cfg.centers();
        for (p, &m) in data.points.iter().zip(&data.modes) {
            let d = ((p[0] - centers[m][0]).powi(2) + (p[1] - centers[m][1]).powi(2)).sqrt();
            assert!(d < 6.0 * cfg.mode_std);
        }
        for (y, &m) in data.embeddings.iter().zip(&data.modes) {
            let argmax = y.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, m);
        }
    }

    #[test]
    fn synthetic_images_are_in_range() {
        let imgs = synthetic_images(10, 16, 4, &mut seeded(1));
        assert!(imgs.iter().all(|(img, c)| *c < 4 && img.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}

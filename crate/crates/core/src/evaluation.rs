//! Fréchet distances between Gaussian fits of features, the sampling-based
//! score protocol with its split-half null baseline, and the 2-D toy metric.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{tensor_to_images, Image};
use crate::embedding::{Embedder, ProxyEmbedder};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Eigenvalues above this negative threshold are treated as roundoff and clipped to 0.
pub const EIGEN_CLIP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 feature rows, got {n}")));
    }
    let k = features[0].len();
    if features.iter().any(|r| r.len() != k) {
        return Err(invalid("feature rows have differing dimensions"));
    }
    let x = DMatrix::from_fn(n, k, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, k, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(GaussianStats { mean, cov, count: n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m.clone(), 1e-14, 10_000).ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))
}

fn clipped(values: &DVector<f64>, scale: f64) -> Result<DVector<f64>> {
    let tol = EIGEN_CLIP * scale.max(1.0);
    if let Some(v) = values.iter().find(|&&v| v < -tol) {
        return Err(Error::Numeric(format!("matrix is not positive semidefinite (eigenvalue {v})")));
    }
    Ok(values.map(|v| v.max(0.0)))
}

/// Symmetric PSD square root via eigendecomposition with clipping at 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let e = eigen(&s)?;
    let scale = e.eigenvalues.amax();
    let root = clipped(&e.eigenvalues, scale)?.map(f64::sqrt);
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, with the trace of the root
/// computed from the symmetric product `Σ1^{1/2} Σ2 Σ1^{1/2}`.
pub fn frechet_distance(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", g1.dim(), g2.dim())));
    }
    let dmu = (&g1.mean - &g2.mean).norm_squared();
    let r1 = psd_sqrt(&g1.cov)?;
    let mut prod = &r1 * &g2.cov * &r1;
    symmetrize(&mut prod);
    let e = eigen(&prod)?;
    let scale = e.eigenvalues.amax();
    let tr_root: f64 = clipped(&e.eigenvalues, scale)?.iter().map(|v| v.sqrt()).sum();
    let fd = dmu + g1.cov.trace() + g2.cov.trace() - 2.0 * tr_root;
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    InceptionExternal,
    Proxy,
    Identity,
}

/// Deterministic feature map applied to both generated and reference items.
pub enum FeatureExtractor {
    /// Not bundled; always reports the backend as unavailable.
    InceptionExternal,
    /// Proxy embedder over images with values in [0, 1].
    Proxy(ProxyEmbedder),
    /// Flattened raw values.
    Identity,
}

impl FeatureExtractor {
    pub fn kind(&self) -> ExtractorKind {
        match self {
            Self::InceptionExternal => ExtractorKind::InceptionExternal,
            Self::Proxy(_) => ExtractorKind::Proxy,
            Self::Identity => ExtractorKind::Identity,
        }
    }

    pub fn output_dim(&self, item_len: usize) -> usize {
        match self {
            Self::InceptionExternal => 2048,
            Self::Proxy(p) => p.dim(),
            Self::Identity => item_len,
        }
    }

    /// Features of a batch: `(B, …)` for identity, `(B, C, H, W)` for proxy.
    pub fn extract(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::InceptionExternal => Err(Error::BackendUnavailable(
                "Inception features require external weights that are not bundled; use the proxy or identity extractor".into(),
            )),
            Self::Identity => Ok(batch.flatten_from(1)?.to_vec2()?),
            Self::Proxy(p) => tensor_to_images(batch)?.iter().map(|img| Ok(p.embed(img)?.values)).collect(),
        }
    }

    pub fn extract_images(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Proxy(p) => images.iter().map(|img| Ok(p.embed(img)?.values)).collect(),
            _ => self.extract(&crate::data::images_to_tensor(images)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidConfig {
    pub n: usize,
    /// Ridge added to both covariances; 0 disables it.
    pub shrinkage: f64,
    /// Items generated per call of the generator.
    pub batch: usize,
}

impl Default for FidConfig {
    fn default() -> Self {
        Self { n: 5000, shrinkage: 0.0, batch: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidScore {
    pub score: f64,
    pub n: usize,
    pub extractor: ExtractorKind,
}

fn shrink(mut g: GaussianStats, ridge: f64) -> GaussianStats {
    for i in 0..g.dim() {
        g.cov[(i, i)] += ridge;
    }
    g
}

/// Fit with the conditioning check: fewer than `k + 1` rows is an error
/// unless shrinkage is enabled.
pub fn fit_checked(features: &[Vec<f64>], cfg: &FidConfig) -> Result<GaussianStats> {
    let k = features.first().map_or(0, Vec::len);
    if features.len() < k + 1 && cfg.shrinkage <= 0.0 {
        return Err(Error::IllConditioned(format!(
            "{} samples cannot give a full-rank covariance in {k} dimensions; enable shrinkage or raise n",
            features.len()
        )));
    }
    Ok(shrink(fit_gaussian(features)?, cfg.shrinkage))
}

/// Score `n` generated items against reference features. `generate(start, len)`
/// returns items `start..start+len` of the generator's sequence.
pub fn fid_protocol(
    generate: &mut dyn FnMut(usize, usize) -> Result<Tensor>,
    reference: &GaussianStats,
    extractor: &FeatureExtractor,
    cfg: &FidConfig,
) -> Result<FidScore> {
    let mut features = Vec::with_capacity(cfg.n);
    let mut start = 0;
    while start < cfg.n {
        let len = cfg.batch.max(1).min(cfg.n - start);
        features.extend(extractor.extract(&generate(start, len)?)?);
        start += len;
    }
    let g = fit_checked(&features, cfg)?;
    let r = shrink(reference.clone(), cfg.shrinkage);
    Ok(FidScore { score: frechet_distance(&g, &r)?, n: cfg.n, extractor: extractor.kind() })
}

/// Same-distribution baseline: distance between the fits of two random halves
/// of the reference features.
pub fn split_half_baseline(reference: &[Vec<f64>], cfg: &FidConfig, rng: &mut Rng) -> Result<f64> {
    let mut idx: Vec<usize> = (0..reference.len()).collect();
    idx.shuffle(rng);
    let half = reference.len() / 2;
    let a: Vec<Vec<f64>> = idx[..half].iter().map(|&i| reference[i].clone()).collect();
    let b: Vec<Vec<f64>> = idx[half..2 * half].iter().map(|&i| reference[i].clone()).collect();
    frechet_distance(&fit_checked(&a, cfg)?, &fit_checked(&b, cfg)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDivergence {
    pub frechet: f64,
    /// Samples assigned to each mode center by nearest distance.
    pub mode_counts: Vec<usize>,
}

impl ToyDivergence {
    pub fn empty_modes(&self) -> Vec<usize> {
        self.mode_counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(i, _)| i).collect()
    }

    /// Fraction of samples at the least-populated mode.
    pub fn min_mode_fraction(&self) -> f64 {
        let total: usize = self.mode_counts.iter().sum();
        *self.mode_counts.iter().min().unwrap_or(&0) as f64 / total.max(1) as f64
    }
}

pub fn nearest_mode(p: &[f64; 2], centers: &[[f64; 2]]) -> usize {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(i, _)| i)
}

/// Fréchet distance on raw 2-D coordinates plus the per-mode sample counts.
pub fn toy_divergence(samples: &[[f64; 2]], reference: &[[f64; 2]], centers: &[[f64; 2]]) -> Result<ToyDivergence> {
    let rows = |pts: &[[f64; 2]]| pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>();
    let frechet = frechet_distance(&fit_gaussian(&rows(samples))?, &fit_gaussian(&rows(reference))?)?;
    let mut mode_counts = vec![0; centers.len()];
    for p in samples {
        mode_counts[nearest_mode(p, centers)] += 1;
    }
    Ok(ToyDivergence { frechet, mode_counts })
}

/// One row of the metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub plan_hash: String,
    pub method: String,
    pub step: usize,
    pub n: usize,
    pub extractor: String,
    pub score: f64,
    pub seed: u64,
}

pub const METRIC_HEADER: &str = "plan_hash,method,step,n,extractor,score,seed";

/// Append rows to a CSV, writing the header when the file is new.
pub fn append_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRIC_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{},{},{},{},{},{},{}", r.plan_hash, r.method, r.step, r.n, r.extractor, r.score, r.seed)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn g1(mean: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: DVector::from_element(1, mean), cov: DMatrix::from_element(1, 1, var), count: 2 }
    }

    #[test]
    fn univariate_closed_forms() {
        assert!((frechet_distance(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&g1(0.0, 1.0), &g1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&g1(0.3, 2.0), &g1(0.3, 2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn two_point_fit() {
        let g = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(g.mean[0], 1.0);
        assert_eq!(g.cov[(0, 0)], 2.0);
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g2 = fit_gaussian(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert!(matches!(frechet_distance(&g1(0.0, 1.0), &g2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn covariance_is_exactly_symmetric() {
        let mut rng = seeded(4);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| normal_vec(&mut rng, 5)).collect();
        let g = fit_gaussian(&rows).unwrap();
        assert_eq!(g.cov, g.cov.transpose());
    }

    #[test]
    fn toy_divergence_of_identical_sets_is_zero() {
        let mut rng = seeded(1);
        let pts: Vec<[f64; 2]> = (0..200).map(|_| { let v = normal_vec(&mut rng, 2); [v[0], v[1]] }).collect();
        let d = toy_divergence(&pts, &pts, &[[0.0, 0.0], [5.0, 5.0]]).unwrap();
        assert!(d.frechet < 1e-10);
        assert_eq!(d.empty_modes(), vec![1]);
    }

    #[test]
    fn ill_conditioned_without_shrinkage() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64; 4]).collect();
        let cfg = FidConfig { n: 3, ..Default::default() };
        assert!(matches!(fit_checked(&rows, &cfg), Err(Error::IllConditioned(_))));
        assert!(fit_checked(&rows, &FidConfig { shrinkage: 1e-3, ..cfg }).is_ok());
    }

    #[test]
    fn inception_backend_is_unavailable() {
        let t = Tensor::zeros((1, 3, 4, 4), crate::nn::DTYPE, &candle_core::Device::Cpu).unwrap();
        assert!(matches!(FeatureExtractor::InceptionExternal.extract(&t), Err(Error::BackendUnavailable(_))));
    }
}

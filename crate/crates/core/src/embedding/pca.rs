use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_dim, Embedding, SourceTag};
use crate::error::{invalid, Result};

/// Rank-k principal-component map. `components` is `k × d` with orthonormal rows;
/// `explained_variance` is descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub source: SourceTag,
}

pub fn pca_fit(embeddings: &[Embedding], k: usize) -> Result<PcaTransform> {
    let first = embeddings.first().ok_or_else(|| invalid("PCA needs at least one embedding"))?;
    let d = first.dim();
    if k == 0 || k > d {
        return Err(invalid(format!("PCA rank {k} must be in 1..={d}")));
    }
    if embeddings.len() < k {
        return Err(invalid(format!("PCA rank {k} exceeds the {} available points", embeddings.len())));
    }
    let n = embeddings.len();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        check_dim("PCA input", d, e.dim())?;
        for (m, v) in mean.iter_mut().zip(&e.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| embeddings[i].values[j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let denom = (n.max(2) - 1) as f64;
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut row: Vec<f64> = v_t.row(idx).iter().copied().collect();
        // Sign convention: the largest-magnitude coordinate is positive.
        let pivot = row.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        explained_variance.push(svd.singular_values[idx].powi(2) / denom);
    }
    // Rank-deficient data leaves fewer singular vectors than requested.
    if components.len() < k {
        complete_basis(&mut components, d, k);
        explained_variance.resize(k, 0.0);
    }
    Ok(PcaTransform { mean, components, explained_variance, source: first.source })
}

/// Extend an orthonormal row set to `k` rows by Gram-Schmidt over unit vectors.
fn complete_basis(rows: &mut Vec<Vec<f64>>, d: usize, k: usize) {
    for axis in 0..d {
        if rows.len() == k {
            return;
        }
        let mut v = DVector::from_fn(d, |i, _| if i == axis { 1.0 } else { 0.0 });
        for r in rows.iter() {
            let r = DVector::from_column_slice(r);
            v -= &r * r.dot(&v);
        }
        let norm = v.norm();
        if norm > 1e-6 {
            rows.push((v / norm).iter().copied().collect());
        }
    }
}

impl PcaTransform {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `y − mean` in the component basis.
    pub fn apply(&self, y: &Embedding) -> Result<Embedding> {
        check_dim("pca_apply", self.dim(), y.dim())?;
        let z = self
            .components
            .iter()
            .map(|c| c.iter().zip(&y.values).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum())
            .collect();
        Ok(Embedding { values: z, source: SourceTag::PcaK })
    }

    /// `mean + Σ z_i · component_i`.
    pub fn invert(&self, z: &Embedding) -> Result<Embedding> {
        check_dim("pca_invert", self.k(), z.dim())?;
        let mut y = self.mean.clone();
        for (c, zi) in self.components.iter().zip(&z.values) {
            for (yj, cj) in y.iter_mut().zip(c) {
                *yj += zi * cj;
            }
        }
        Ok(Embedding { values: y, source: self.source })
    }

    /// Mean squared reconstruction error `‖y − invert(apply(y))‖²` over `data`.
    pub fn reconstruction_error(&self, data: &[Embedding]) -> Result<f64> {
        if data.is_empty() {
            return Err(invalid("reconstruction error of an empty set"));
        }
        let mut total = 0.0;
        for y in data {
            let r = self.invert(&self.apply(y)?)?;
            total += y.values.iter().zip(&r.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / data.len() as f64)
    }
}

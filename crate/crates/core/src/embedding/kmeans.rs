use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_dim, Embedding, SourceTag};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        Self { max_iters: 300, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeMode {
    OneHot,
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansCodebook {
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment pass.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn distinct_count(points: &[&[f64]]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(embeddings: &[Embedding], k: usize, rng: &mut Rng) -> Result<KMeansCodebook> {
    kmeans_fit_with(embeddings, k, KMeansSettings::default(), rng)
}

pub fn kmeans_fit_with(embeddings: &[Embedding], k: usize, settings: KMeansSettings, rng: &mut Rng) -> Result<KMeansCodebook> {
    if k == 0 {
        return Err(invalid("K-means needs K >= 1"));
    }
    let first = embeddings.first().ok_or_else(|| invalid("K-means on an empty dataset"))?;
    let d = first.dim();
    for e in embeddings {
        check_dim("K-means input", d, e.dim())?;
    }
    let points: Vec<&[f64]> = embeddings.iter().map(|e| e.values.as_slice()).collect();
    let distinct = distinct_count(&points);
    if k > distinct {
        return Err(Error::DegenerateCodebook { requested: k, distinct });
    }

    let mut centroids = seed_plus_plus(&points, k, rng);
    let mut assignment = vec![0usize; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..settings.max_iters {
        iterations += 1;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, dist) = nearest(&centroids, p);
            assignment[i] = j;
            dists[i] = dist;
            inertia += dist;
        }
        history.push(inertia);

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let next = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                // Empty cluster: move it onto the worst-fit point. That point's
                // cost drops to zero, so the objective cannot increase.
                let far = (0..points.len()).max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a))).unwrap();
                dists[far] = 0.0;
                points[far].to_vec()
            };
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < settings.tol {
            break;
        }
    }
    Ok(KMeansCodebook { centroids, inertia_history: history, iterations })
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let dist = sq_dist(c, p);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn seed_plus_plus(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = d2.iter().rposition(|&w| w > 0.0).unwrap();
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            unreachable!("fewer distinct points than clusters was checked up front")
        };
        let c = points[pick].to_vec();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

impl KMeansCodebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn assign(&self, y: &Embedding) -> Result<usize> {
        check_dim("kmeans_assign", self.dim(), y.dim())?;
        Ok(nearest(&self.centroids, &y.values).0)
    }

    pub fn embed(&self, id: usize, mode: CodeMode) -> Result<Embedding> {
        if id >= self.k() {
            return Err(invalid(format!("cluster id {id} out of range for K={}", self.k())));
        }
        Ok(match mode {
            CodeMode::OneHot => {
                let mut v = vec![0.0; self.k()];
                v[id] = 1.0;
                Embedding { values: v, source: SourceTag::KmeansOnehot }
            }
            CodeMode::Centroid => Embedding { values: self.centroids[id].clone(), source: SourceTag::KmeansOnehot },
        })
    }
}

/// Normalized assignment counts of `dataset` under `codebook`.
pub fn empirical_cluster_distribution(codebook: &KMeansCodebook, dataset: &[Embedding]) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(invalid("cluster distribution of an empty dataset"));
    }
    let mut counts = vec![0usize; codebook.k()];
    for y in dataset {
        counts[codebook.assign(y)?] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / dataset.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn emb(v: Vec<f64>) -> Embedding {
        Embedding { values: v, source: SourceTag::Proxy }
    }

    fn blobs(n_each: usize, seed: u64) -> (Vec<Embedding>, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (label, center) in [[0.0, 0.0], [100.0, 0.0]].iter().enumerate() {
            for _ in 0..n_each {
                let z = normal_vec(&mut rng, 2);
                data.push(emb(vec![center[0] + z[0], center[1] + z[1]]));
                labels.push(label);
            }
        }
        (data, labels)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = vec![emb(vec![1.0, 2.0]), emb(vec![3.0, 2.0]), emb(vec![2.0, 8.0])];
        let cb = kmeans_fit(&data, 1, &mut seeded(0)).unwrap();
        assert!((cb.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((cb.centroids[0][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn separated_blobs_recover_true_partition() {
        let (data, truth) = blobs(6, 1);
        let cb = kmeans_fit(&data, 2, &mut seeded(2)).unwrap();
        let got: Vec<usize> = data.iter().map(|y| cb.assign(y).unwrap()).collect();
        // Brute force: among all 2-labelings, find the one with minimal WCSS.
        let n = data.len();
        let wcss = |lab: &[usize]| -> f64 {
            (0..2)
                .map(|c| {
                    let members: Vec<&Embedding> = data.iter().zip(lab).filter(|(_, &l)| l == c).map(|(e, _)| e).collect();
                    if members.is_empty() {
                        return 0.0;
                    }
                    let m: Vec<f64> = (0..2).map(|j| members.iter().map(|e| e.values[j]).sum::<f64>() / members.len() as f64).collect();
                    members.iter().map(|e| sq_dist(&e.values, &m)).sum::<f64>()
                })
                .sum()
        };
        let mut best = (f64::INFINITY, vec![]);
        for mask in 0u32..(1 << n) {
            let lab: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let w = wcss(&lab);
            if w < best.0 {
                best = (w, lab);
            }
        }
        let same_partition = |a: &[usize], b: &[usize]| a == b || a.iter().zip(b).all(|(x, y)| x != y);
        assert!(same_partition(&best.1, &truth));
        assert!(same_partition(&got, &truth));
    }

    #[test]
    fn centroids_assign_to_themselves() {
        let mut rng = seeded(3);
        let data: Vec<Embedding> = (0..200).map(|_| emb(normal_vec(&mut rng, 3))).collect();
        let cb = kmeans_fit(&data, 8, &mut seeded(4)).unwrap();
        for j in 0..cb.k() {
            assert_eq!(cb.assign(&emb(cb.centroids[j].clone())).unwrap(), j);
        }
        let uniq: HashSet<Vec<u64>> = cb.centroids.iter().map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(uniq.len(), 8);
    }

    #[test]
    fn objective_is_monotone_over_iterations() {
        let mut rng = seeded(5);
        let data: Vec<Embedding> = (0..500).map(|_| emb(normal_vec(&mut rng, 4))).collect();
        let cb = kmeans_fit(&data, 16, &mut seeded(6)).unwrap();
        assert!(cb.inertia_history.len() > 1);
        assert!(cb.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{:?}", cb.inertia_history);
    }

    #[test]
    fn degenerate_codebook_is_rejected() {
        let data = vec![emb(vec![1.0]), emb(vec![1.0]), emb(vec![2.0])];
        let err = kmeans_fit(&data, 3, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateCodebook { requested: 3, distinct: 2 }));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = KMeansCodebook { centroids: vec![vec![-1.0], vec![1.0]], inertia_history: vec![], iterations: 0 };
        assert_eq!(cb.assign(&emb(vec![0.0])).unwrap(), 0);
    }

    #[test]
    fn one_hot_and_centroid_codes() {
        let cb = KMeansCodebook { centroids: vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], inertia_history: vec![], iterations: 0 };
        assert_eq!(cb.embed(1, CodeMode::OneHot).unwrap().values, vec![0.0, 1.0, 0.0]);
        assert_eq!(cb.embed(2, CodeMode::Centroid).unwrap().values, vec![5.0, 6.0]);
        assert!(cb.embed(3, CodeMode::OneHot).is_err());
    }

    #[test]
    fn cluster_distribution_properties() {
        let cb = KMeansCodebook { centroids: vec![vec![0.0], vec![10.0], vec![20.0], vec![30.0]], inertia_history: vec![], iterations: 0 };
        assert_eq!(empirical_cluster_distribution(&cb, &[emb(vec![9.0])]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert!(empirical_cluster_distribution(&cb, &[]).is_err());

        // Uniform synthetic assignments: each bin within 3 multinomial standard deviations.
        let n = 4000;
        let data: Vec<Embedding> = (0..n).map(|i| emb(vec![10.0 * (i % 4) as f64])).collect();
        let p = empirical_cluster_distribution(&cb, &data).unwrap();
        let sd = (0.25 * 0.75 / n as f64).sqrt();
        assert!(p.iter().all(|&q| (q - 0.25).abs() <= 3.0 * sd));

        let mut rng = seeded(7);
        for _ in 0..20 {
            let data: Vec<Embedding> = (0..37).map(|_| emb(vec![rng.random_range(-5.0..35.0)])).collect();
            let p = empirical_cluster_distribution(&cb, &data).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

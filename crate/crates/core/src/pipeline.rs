//! Two-stage sampling and its comparators.
//!
//! For item `i` of a plan with seed `s`, stage 1 draws from
//! `item_rng(s, i, 0)` and stage 2 from `item_rng(s, i, 1)`, so an item's
//! output does not depend on the other items in the plan.

use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::aux_model::AuxModel;
use crate::diffusion::{CondInput, Conditioning, SamplerConfig, ScheduleConfig};
use crate::embedding::KMeansCodebook;
use crate::error::{invalid, Error, Result};
use crate::image_model::{ImageModel, Regime};
use crate::rng::{item_rng, ItemStreams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vcdm,
    EdmDirect,
    ClassCond,
    VcdmOracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vcdm, Method::EdmDirect, Method::ClassCond, Method::VcdmOracle];

    /// Command-line spelling.
    pub fn flag(self) -> &'static str {
        match self {
            Method::Vcdm => "vcdm",
            Method::EdmDirect => "edm",
            Method::ClassCond => "class-cond",
            Method::VcdmOracle => "oracle",
        }
    }

    pub fn from_flag(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.flag() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}; expected one of vcdm, edm, class-cond, oracle")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub sampler: SamplerConfig,
    pub schedule: ScheduleConfig,
}

impl StageConfig {
    /// Embedding-space default: 64 deterministic Heun steps.
    pub fn embedding_default() -> Self {
        Self { sampler: SamplerConfig::deterministic(64), schedule: ScheduleConfig::default() }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { sampler: SamplerConfig::default(), schedule: ScheduleConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub method: Method,
    pub a: CondInput,
    pub count: usize,
    pub seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Items processed together.
    pub batch: usize,
    /// Keep the stage-1 embeddings in the result.
    pub debug: bool,
}

impl SamplingPlan {
    pub fn new(method: Method, count: usize, seed: u64) -> Self {
        Self {
            method,
            a: CondInput::Null,
            count,
            seed,
            stage1: StageConfig::embedding_default(),
            stage2: StageConfig::default(),
            batch: 256,
            debug: false,
        }
    }
}

/// Sampled items. `embeddings` is populated only for debug plans.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub items: Tensor,
    pub embeddings: Option<Vec<Vec<f64>>>,
    /// Per-item wall-clock milliseconds of each stage.
    pub stage1_ms: Vec<f64>,
    pub stage2_ms: Vec<f64>,
}

/// A model together with the name of the checkpoint it came from.
pub struct Labeled<'a, T> {
    pub model: &'a T,
    pub label: &'a str,
}

impl<T> Clone for Labeled<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Labeled<'_, T> {}

/// Stage-1 source of `y`.
pub enum EmbeddingSource<'a> {
    Aux(Labeled<'a, AuxModel>),
    /// Every item receives this embedding.
    PointMass(Vec<f64>),
}

/// Dataset `(y, a)` pairs for the oracle method.
#[derive(Debug, Clone, Default)]
pub struct OracleReference {
    pub rows: Vec<(Vec<f64>, CondInput)>,
}

impl OracleReference {
    /// Rows consistent with `a`: all rows for null, the matching class otherwise.
    pub fn matching(&self, a: CondInput) -> Vec<&Vec<f64>> {
        self.rows.iter().filter(|(_, c)| a == CondInput::Null || *c == a).map(|(y, _)| y).collect()
    }

    /// `count` draws uniformly without replacement, or with replacement when
    /// `count` exceeds the matching rows.
    pub fn draw(&self, a: CondInput, count: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let pool = self.matching(a);
        if pool.is_empty() {
            return Err(invalid(format!("no dataset rows match {a:?}")));
        }
        if count <= pool.len() {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(rng);
            Ok(idx[..count].iter().map(|&i| pool[i].clone()).collect())
        } else {
            Ok((0..count).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect())
        }
    }
}

/// Codebook and its empirical cluster distribution for the cluster-id method.
pub struct ClassCondPrior<'a> {
    pub codebook: &'a KMeansCodebook,
    pub distribution: Vec<f64>,
}

impl ClassCondPrior<'_> {
    fn validate(&self) -> Result<()> {
        if self.distribution.len() != self.codebook.k() {
            return Err(invalid(format!(
                "cluster distribution has {} entries but the codebook has {} clusters",
                self.distribution.len(),
                self.codebook.k()
            )));
        }
        if self.distribution.iter().any(|p| !(*p >= 0.0)) || self.distribution.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("cluster distribution must be nonnegative with positive mass"));
        }
        Ok(())
    }

    /// Inverse-CDF draw from the categorical.
    pub fn draw(&self, rng: &mut Rng) -> usize {
        let total: f64 = self.distribution.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, p) in self.distribution.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.distribution.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn streams(seed: u64, range: std::ops::Range<usize>, stream: u64) -> Vec<Rng> {
    range.map(|i| item_rng(seed, i as u64, stream)).collect()
}

/// Rng for plan-level draws such as the oracle permutation.
pub fn plan_rng(seed: u64) -> Rng {
    item_rng(seed, u64::MAX, 2)
}

fn chunks(count: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let batch = batch.max(1);
    (0..count.div_ceil(batch)).map(move |c| c * batch..((c + 1) * batch).min(count))
}

fn stage2(
    image: &ImageModel,
    plan: &SamplingPlan,
    range: std::ops::Range<usize>,
    embedding: Option<Tensor>,
) -> Result<(Tensor, f64)> {
    let n = range.len();
    let start = Instant::now();
    let class = CondInput::batch_classes(&vec![plan.a; n])?;
    let cond = Conditioning { embedding, class, aug: None };
    let mut rngs = streams(plan.seed, range, 1);
    let out = image.sample_images(&cond, n, &plan.stage2.sampler, &plan.stage2.schedule, &mut ItemStreams(&mut rngs))?;
    Ok((out, start.elapsed().as_secs_f64() * 1e3 / n as f64))
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Ok(Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu)?)
}

fn finish(parts: Vec<Tensor>, embeddings: Vec<Vec<f64>>, s1: Vec<f64>, s2: Vec<f64>, debug: bool) -> Result<SampleBatch> {
    Ok(SampleBatch {
        items: Tensor::cat(&parts, 0)?,
        embeddings: if debug { Some(embeddings) } else { None },
        stage1_ms: s1,
        stage2_ms: s2,
    })
}

fn check_count(plan: &SamplingPlan) -> Result<()> {
    if plan.count == 0 {
        return Err(invalid("plan count must be positive"));
    }
    Ok(())
}

/// Stage 2 conditioned on per-item embeddings supplied by `stage1`.
fn two_stage<F>(plan: &SamplingPlan, image: &ImageModel, mut stage1: F) -> Result<SampleBatch>
where
    F: FnMut(std::ops::Range<usize>) -> Result<Vec<Vec<f64>>>,
{
    check_count(plan)?;
    let (mut parts, mut all_y, mut s1, mut s2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for range in chunks(plan.count, plan.batch) {
        let n = range.len();
        let t = Instant::now();
        let ys = stage1(range.clone())?;
        s1.extend(std::iter::repeat_n(t.elapsed().as_secs_f64() * 1e3 / n as f64, n));
        let (out, ms) = stage2(image, plan, range, Some(rows_tensor(&ys)?))?;
        s2.extend(std::iter::repeat_n(ms, n));
        parts.push(out);
        if plan.debug {
            all_y.extend(ys);
        }
    }
    finish(parts, all_y, s1, s2, plan.debug)
}

fn require_embedding_regime(image: &Labeled<ImageModel>, y_dim: usize, source: &str) -> Result<()> {
    let cfg = &image.model.cfg;
    if cfg.regime != Regime::Embedding || cfg.y_dim != y_dim {
        return Err(Error::Configuration(format!(
            "{source} produces {y_dim}-dimensional embeddings but image checkpoint {} expects regime {:?} with y_dim {}",
            image.label, cfg.regime, cfg.y_dim
        )));
    }
    Ok(())
}

/// `y ~ p(y | a)` then `x ~ p(x | y, a)`; `y` is discarded unless `plan.debug`.
pub fn vcdm_sample(plan: &SamplingPlan, source: &EmbeddingSource, image: Labeled<ImageModel>) -> Result<SampleBatch> {
    match source {
        EmbeddingSource::Aux(aux) => {
            require_embedding_regime(&image, aux.model.cfg.embed_dim, &format!("auxiliary checkpoint {}", aux.label))?;
            two_stage(plan, image.model, |range| {
                let n = range.len();
                let mut rngs = streams(plan.seed, range, 0);
                let ys = aux.model.sample_embeddings(&vec![plan.a; n], &plan.stage1.sampler, &plan.stage1.schedule, &mut ItemStreams(&mut rngs))?;
                Ok(ys.into_iter().map(|e| e.values).collect())
            })
        }
        EmbeddingSource::PointMass(y) => {
            require_embedding_regime(&image, y.len(), "the point-mass source")?;
            two_stage(plan, image.model, |range| Ok(vec![y.clone(); range.len()]))
        }
    }
}

/// Stage 2 fed ground-truth dataset embeddings consistent with `plan.a`.
pub fn oracle_sample(plan: &SamplingPlan, reference: &OracleReference, image: Labeled<ImageModel>) -> Result<SampleBatch> {
    check_count(plan)?;
    let ys = reference.draw(plan.a, plan.count, &mut plan_rng(plan.seed))?;
    require_embedding_regime(&image, ys[0].len(), "the oracle dataset")?;
    two_stage(plan, image.model, |range| Ok(ys[range].to_vec()))
}

/// Cluster id from the empirical categorical, then the image given its one-hot code.
pub fn class_cond_sample(plan: &SamplingPlan, prior: &ClassCondPrior, image: Labeled<ImageModel>) -> Result<SampleBatch> {
    prior.validate()?;
    let k = prior.codebook.k();
    let cfg = &image.model.cfg;
    if cfg.regime != Regime::ClusterId || cfg.y_dim != k {
        return Err(Error::Configuration(format!(
            "image checkpoint {} expects regime {:?} with y_dim {}, the codebook has {k} clusters",
            image.label, cfg.regime, cfg.y_dim
        )));
    }
    two_stage(plan, image.model, |range| {
        Ok(streams(plan.seed, range, 0)
            .iter_mut()
            .map(|rng| {
                let mut one_hot = vec![0.0; k];
                one_hot[prior.draw(rng)] = 1.0;
                one_hot
            })
            .collect())
    })
}

/// Cluster ids drawn by a class-cond plan, in item order.
pub fn class_cond_ids(plan: &SamplingPlan, prior: &ClassCondPrior) -> Result<Vec<usize>> {
    prior.validate()?;
    Ok(streams(plan.seed, 0..plan.count, 0).iter_mut().map(|rng| prior.draw(rng)).collect())
}

/// Direct sampling from an image model without a stage 1.
pub fn edm_sample(plan: &SamplingPlan, image: Labeled<ImageModel>) -> Result<SampleBatch> {
    check_count(plan)?;
    if image.model.cfg.regime != Regime::Unconditional {
        return Err(Error::Configuration(format!(
            "direct sampling needs an unconditional image checkpoint; {} is {:?}",
            image.label, image.model.cfg.regime
        )));
    }
    let (mut parts, mut s2) = (Vec::new(), Vec::new());
    for range in chunks(plan.count, plan.batch) {
        let n = range.len();
        let (out, ms) = stage2(image.model, plan, range, None)?;
        parts.push(out);
        s2.extend(std::iter::repeat_n(ms, n));
    }
    finish(parts, Vec::new(), vec![0.0; plan.count], s2, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stage1_median_ms: f64,
    pub stage2_median_ms: f64,
    /// `stage1 / (stage1 + stage2)`.
    pub overhead_fraction: f64,
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

pub fn timing_report(batch: &SampleBatch) -> TimingReport {
    let s1 = median(&batch.stage1_ms);
    let s2 = median(&batch.stage2_ms);
    let total = s1 + s2;
    TimingReport { stage1_median_ms: s1, stage2_median_ms: s2, overhead_fraction: if total > 0.0 { s1 / total } else { 0.0 } }
}

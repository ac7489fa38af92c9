//! The experiment commands. Each returns a summary; all data goes to files
//! under the output directory.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::config::{DatasetKind, ExperimentConfig, SweepArm};
use super::data::{embedder, extractor, load_manifest, prepare, Prepared, RING_TRAIN};
use super::plot::scatter_png;
use super::store::{check_hash, latest_checkpoint, CheckpointIndex, IndexEntry, RunPaths, Which};
use crate::aux_model::{AuxExample, AuxModel, AuxTrainer};
use crate::checkpoint::Checkpoint;
use crate::data::{grid, tensor_to_images, Split};
use crate::diffusion::CondInput;
use crate::embedding::{
    empirical_cluster_distribution, kmeans_fit, pca_fit, read_table, read_table_header, write_table, CodeMode, Embedding,
    KMeansCodebook, SourceTag, TableTag,
};
use crate::error::{Error, Result};
use crate::evaluation::{append_metric_rows, fid_protocol, fit_checked, FeatureExtractor, GaussianStats, MetricRow};
use crate::image_model::{Backbone, ImageExample, ImageModel, ImageTrainer, Regime};
use crate::pipeline::{
    class_cond_sample, edm_sample, oracle_sample, timing_report, vcdm_sample, ClassCondPrior, EmbeddingSource, Labeled,
    Method, OracleReference, SampleBatch, SamplingPlan, TimingReport,
};
use crate::rng::{seeded, split_seed};

/// Child seeds of the config seed.
const KMEANS_SEED: u64 = 20;
const HELDOUT_SEED: u64 = 30;
const SWEEP_KMEANS_SEED: u64 = 40;
const SWEEP_TRAIN_SEED: u64 = 50;
const CLASS_PLAN_SEED: u64 = 1000;

pub const SWEEP_HEADER: &str = "arm,dim_or_k,budget,score,seed,recon_error";

/// A validated config with its hash and artifact paths.
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub paths: RunPaths,
}

impl Session {
    /// Validates the config, creates the output directory and records the
    /// config next to the artifacts it produces.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir)?;
        let hash = cfg.hash();
        let paths = RunPaths::new(&cfg.output_dir, &hash);
        let record = paths.config();
        if !record.exists() {
            std::fs::write(&record, cfg.to_toml()?)?;
        }
        Ok(Self { cfg, hash, paths })
    }
}

fn load_checked(path: &Path, hash: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    check_hash(&ckpt, hash)?;
    Ok(ckpt)
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned())
}

fn embeddings_of(rows: &[Vec<f64>]) -> Vec<Embedding> {
    rows.iter().map(|v| Embedding { values: v.clone(), source: SourceTag::Proxy }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheOutcome {
    pub path: PathBuf,
    pub rows: usize,
    /// False when a complete cache was already present.
    pub written: bool,
}

/// Embed every dataset row once. A complete cache is left untouched; a cache
/// with a corrupt header is reported, never overwritten.
pub fn cmd_cache_embeddings(session: &Session) -> Result<CacheOutcome> {
    let cfg = &session.cfg;
    match cfg.dataset {
        DatasetKind::Ring => {
            let path = session.paths.embeddings();
            if path.exists() && read_table_header(&path)?.count as usize == cfg.ring_count {
                return Ok(CacheOutcome { path, rows: cfg.ring_count, written: false });
            }
            let data = cfg.ring().generate(&mut seeded(split_seed(cfg.seed, RING_TRAIN)));
            let rows: Vec<Vec<f64>> = data.embeddings.iter().map(|e| e.values.clone()).collect();
            write_table(&path, TableTag::Embedding(SourceTag::Proxy), cfg.ring_modes, &rows)?;
            Ok(CacheOutcome { path, rows: rows.len(), written: true })
        }
        DatasetKind::Manifest => {
            let manifest = load_manifest(cfg)?;
            let path = manifest.cache_path().ok_or_else(|| Error::Configuration("manifest has no embedding_cache".into()))?;
            if manifest.cache_complete()? {
                return Ok(CacheOutcome { path, rows: manifest.rows.len(), written: false });
            }
            let e = embedder(cfg)?;
            let rows = (0..manifest.rows.len())
                .map(|i| Ok(e.embed(&manifest.load_image(i)?)?.values))
                .collect::<Result<Vec<_>>>()?;
            write_table(&path, TableTag::Embedding(e.tag()), e.dim(), &rows)?;
            Ok(CacheOutcome { path, rows: rows.len(), written: true })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Aux,
    /// The image model in the regime of the configured method.
    Image,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after this many total steps without a final checkpoint, as an
    /// interrupted run would.
    pub stop_after: Option<usize>,
    /// Continue from this checkpoint instead of the latest retained one.
    pub resume_from: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub which: Which,
    pub step: usize,
    pub last_loss: Option<f64>,
    pub loss_csv: PathBuf,
    pub retained: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    codebook: KMeansCodebook,
    distribution: Vec<f64>,
}

/// Cluster codebook of the training embeddings, fitted once per config.
fn codebook(session: &Session, train_y: &[Vec<f64>]) -> Result<(KMeansCodebook, Vec<f64>)> {
    let path = session.paths.codebook();
    if path.exists() {
        let f: CodebookFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        return Ok((f.codebook, f.distribution));
    }
    let emb = embeddings_of(train_y);
    let cb = kmeans_fit(&emb, session.cfg.kmeans_k, &mut seeded(split_seed(session.cfg.seed, KMEANS_SEED)))?;
    let distribution = empirical_cluster_distribution(&cb, &emb)?;
    let f = CodebookFile { codebook: cb, distribution };
    std::fs::write(&path, serde_json::to_string(&f)?)?;
    Ok((f.codebook, f.distribution))
}

fn one_hots(cb: &KMeansCodebook, ys: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    embeddings_of(ys).iter().map(|e| Ok(cb.embed(cb.assign(e)?, CodeMode::OneHot)?.values)).collect()
}

/// Image-model `y` columns of the training and held-out rows for `regime`.
type YColumns = Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>;

fn y_columns(session: &Session, data: &Prepared, regime: Regime) -> Result<YColumns> {
    Ok(match regime {
        Regime::Unconditional => None,
        Regime::Embedding => Some((data.train.y.clone(), data.heldout.y.clone())),
        Regime::ClusterId => {
            let (cb, _) = codebook(session, &data.train.y)?;
            Some((one_hots(&cb, &data.train.y)?, one_hots(&cb, &data.heldout.y)?))
        }
    })
}

enum Run {
    Aux(AuxTrainer, Vec<AuxExample>),
    Image(ImageTrainer, Vec<ImageExample>),
}

impl Run {
    fn step(&mut self) -> Result<f64> {
        match self {
            Run::Aux(t, _) => t.step(),
            Run::Image(t, _) => t.step(),
        }
    }

    fn state(&self) -> &crate::train::TrainState {
        match self {
            Run::Aux(t, _) => &t.state,
            Run::Image(t, _) => &t.state,
        }
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        match self {
            Run::Aux(t, _) => t.checkpoint(),
            Run::Image(t, _) => t.checkpoint(),
        }
    }

    fn heldout_loss(&self, n: usize, seed: u64) -> Result<f64> {
        match self {
            Run::Aux(t, h) => t.eval_loss(Some(h), n, seed),
            Run::Image(t, h) => t.eval_loss(Some(h), n, seed),
        }
    }
}

fn write_loss_csv(path: &Path, state: &crate::train::TrainState) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,wall_ms")?;
    for r in &state.curve {
        writeln!(f, "{},{},{}", r.step, r.loss, r.wall_ms)?;
    }
    f.flush()?;
    Ok(())
}

/// Train `target`, resuming from the latest retained checkpoint of this
/// config when one exists.
pub fn cmd_train(session: &Session, target: TrainTarget, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = &session.cfg;
    let data = prepare(cfg)?;
    let which = match target {
        TrainTarget::Aux => Which::Aux,
        TrainTarget::Image => Which::Image(ExperimentConfig::regime_for(cfg.method)),
    };
    let index_path = session.paths.index(which);
    let mut index = CheckpointIndex::load(&index_path)?;
    let start = match (&opts.resume_from, index.latest()) {
        (Some(p), _) => Some(load_checked(p, &session.hash)?),
        (None, Some(e)) => Some(load_checked(&session.paths.dir.join(&e.file), &session.hash)?),
        (None, None) => None,
    };
    let train_cfg = match which {
        Which::Aux => cfg.aux_train(),
        Which::Image(_) => cfg.image_train(),
    };
    let mut run = match which {
        Which::Aux => {
            let examples = data.train.aux_examples();
            let heldout = data.heldout.aux_examples();
            let t = match &start {
                Some(c) => AuxTrainer::resume(&examples, c, train_cfg)?,
                None => AuxTrainer::new(&examples, cfg.aux_model(data.embed_dim, data.class_count), train_cfg, cfg.seed)?,
            };
            Run::Aux(t, heldout)
        }
        Which::Image(regime) => {
            let ys = y_columns(session, &data, regime)?;
            let examples = data.train.image_examples(ys.as_ref().map(|y| y.0.as_slice()));
            let heldout = data.heldout.image_examples(ys.as_ref().map(|y| y.1.as_slice()));
            let y_dim = ys.as_ref().map_or(0, |y| y.0[0].len());
            let t = match (&start, &cfg.finetune_base) {
                (Some(c), _) => ImageTrainer::resume(&examples, c, train_cfg)?,
                (None, Some(base)) => {
                    if regime == Regime::Unconditional {
                        return Err(Error::Configuration("finetune_base applies to conditional regimes only".into()));
                    }
                    ImageTrainer::finetune(&examples, &ImageModel::load(base)?, y_dim, train_cfg, cfg.seed)?
                }
                (None, None) => {
                    let mcfg = cfg.image_model(regime, y_dim, data.channels(), data.resolution(), data.class_count);
                    ImageTrainer::new(&examples, mcfg, train_cfg, None, cfg.seed)?
                }
            };
            Run::Image(t, heldout)
        }
    };
    let total = train_cfg.steps;
    let limit = opts.stop_after.map_or(total, |s| s.min(total));
    let loss_csv = session.paths.loss_csv(which);
    let save = |run: &Run, index: &mut CheckpointIndex| -> Result<()> {
        let step = run.state().step;
        let mut ckpt = run.checkpoint()?;
        ckpt.meta["config_hash"] = session.hash.clone().into();
        ckpt.meta["experiment"] = serde_json::to_value(cfg)?;
        let path = session.paths.checkpoint(which, step);
        ckpt.save(&path)?;
        let heldout_loss = run.heldout_loss(cfg.heldout_n, split_seed(cfg.seed, HELDOUT_SEED))?;
        log::info!("{} step {step}: held-out loss {heldout_loss:.5}, saved {}", which.name(), path.display());
        let dropped = index.record(IndexEntry { step, file: file_name(&path), heldout_loss }, cfg.keep_last);
        index.save(&index_path)?;
        for f in dropped {
            let p = session.paths.dir.join(f);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        write_loss_csv(&loss_csv, run.state())
    };
    if total == 0 && index.latest().is_none() {
        save(&run, &mut index)?;
    }
    while run.state().step < limit {
        run.step()?;
        let step = run.state().step;
        if step % cfg.checkpoint_every == 0 || step == total {
            save(&run, &mut index)?;
        }
    }
    Ok(TrainOutcome {
        which,
        step: run.state().step,
        last_loss: run.state().curve.last().map(|r| r.loss),
        loss_csv,
        retained: index.entries.iter().map(|e| session.paths.dir.join(&e.file)).collect(),
    })
}

/// Dataset `(y, a)` pairs of the training split, for the oracle method.
pub fn oracle_reference(cfg: &ExperimentConfig) -> Result<OracleReference> {
    match cfg.dataset {
        DatasetKind::Ring => {
            let data = prepare(cfg)?;
            Ok(OracleReference { rows: data.train.y.into_iter().zip(data.train.cond).collect() })
        }
        DatasetKind::Manifest => {
            let manifest = load_manifest(cfg)?;
            let missing = || Error::Configuration("the oracle method needs dataset embeddings; run cache-embeddings".into());
            let path = manifest.cache_path().ok_or_else(missing)?;
            if !manifest.cache_complete()? {
                return Err(missing());
            }
            let ys = read_table(&path)?.rows_f64();
            let rows = manifest
                .indices(Split::Train)
                .into_iter()
                .map(|i| {
                    let a = match (cfg.class_conditional, manifest.rows[i].class) {
                        (true, Some(c)) => CondInput::Class(c),
                        _ => CondInput::Null,
                    };
                    (ys[i].clone(), a)
                })
                .collect();
            Ok(OracleReference { rows })
        }
    }
}

/// Everything a method samples from, besides the image model.
enum Source {
    Aux(AuxModel, String),
    Oracle(OracleReference),
    Prior(KMeansCodebook, Vec<f64>),
    None,
}

fn method_source(session: &Session, method: Method) -> Result<Source> {
    Ok(match method {
        Method::Vcdm => {
            let path = latest_checkpoint(&session.paths, Which::Aux)?;
            Source::Aux(AuxModel::from_checkpoint(&load_checked(&path, &session.hash)?)?, file_name(&path))
        }
        Method::VcdmOracle => Source::Oracle(oracle_reference(&session.cfg)?),
        Method::ClassCond => {
            let path = session.paths.codebook();
            if !path.exists() {
                return Err(Error::NotReady(format!("no codebook {}; train the cluster-id image model first", path.display())));
            }
            let f: CodebookFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            Source::Prior(f.codebook, f.distribution)
        }
        Method::EdmDirect => Source::None,
    })
}

fn run_plan(plan: &SamplingPlan, source: &Source, image: &ImageModel, image_label: &str) -> Result<SampleBatch> {
    let img = Labeled { model: image, label: image_label };
    match source {
        Source::Aux(aux, label) => vcdm_sample(plan, &EmbeddingSource::Aux(Labeled { model: aux, label }), img),
        Source::Oracle(reference) => oracle_sample(plan, reference, img),
        Source::Prior(cb, dist) => class_cond_sample(plan, &ClassCondPrior { codebook: cb, distribution: dist.clone() }, img),
        Source::None => edm_sample(plan, img),
    }
}

fn plan(cfg: &ExperimentConfig, method: Method, count: usize, class: Option<u32>) -> SamplingPlan {
    SamplingPlan {
        a: class.map_or(CondInput::Null, CondInput::Class),
        stage1: cfg.stage1(),
        stage2: cfg.stage2(),
        batch: cfg.sample_batch,
        ..SamplingPlan::new(method, count, cfg.seed)
    }
}

/// Split `n` over the classes in `conds` proportionally to their frequency,
/// by largest remainder.
pub fn class_allocation(conds: &[CondInput], n: usize) -> Vec<(u32, usize)> {
    let mut freq = std::collections::BTreeMap::new();
    for c in conds {
        if let CondInput::Class(k) = c {
            *freq.entry(*k).or_insert(0usize) += 1;
        }
    }
    let total: usize = freq.values().sum();
    if total == 0 {
        return Vec::new();
    }
    let mut alloc: Vec<(u32, usize, f64)> = freq
        .iter()
        .map(|(&k, &f)| {
            let exact = n as f64 * f as f64 / total as f64;
            (k, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let short = n - alloc.iter().map(|a| a.1).sum::<usize>();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(short) {
        alloc[i].1 += 1;
    }
    alloc.into_iter().map(|(k, c, _)| (k, c)).collect()
}

/// `n` items for scoring. Class-conditional models get one plan per class,
/// sized by the class frequencies of the training set, each with its own
/// child seed.
fn generate_scored(
    cfg: &ExperimentConfig,
    data: &Prepared,
    method: Method,
    n: usize,
    source: &Source,
    image: &ImageModel,
    label: &str,
) -> Result<Tensor> {
    if data.class_count.is_none() {
        return Ok(run_plan(&plan(cfg, method, n, None), source, image, label)?.items);
    }
    let mut parts = Vec::new();
    for (class, count) in class_allocation(&data.train.cond, n) {
        if count > 0 {
            let p = SamplingPlan { seed: split_seed(cfg.seed, CLASS_PLAN_SEED + class as u64), ..plan(cfg, method, count, Some(class)) };
            parts.push(run_plan(&p, source, image, label)?.items);
        }
    }
    Ok(Tensor::cat(&parts, 0)?)
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub method: Method,
    pub count: usize,
    pub class: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub samples: PathBuf,
    pub grid: PathBuf,
    pub timing: TimingReport,
    pub items: Tensor,
}

#[derive(Serialize)]
struct ArtifactRow<'a> {
    config_hash: &'a str,
    method: &'a str,
    seed: u64,
    count: usize,
    samples: String,
    grid: String,
    image_checkpoint: String,
    timing: TimingReport,
}

/// Draw `count` items with the latest checkpoints the method needs, dump them
/// as a float32 table, tile a preview and append an artifact record.
pub fn cmd_sample(session: &Session, opts: &SampleOptions) -> Result<SampleOutcome> {
    let cfg = &session.cfg;
    let source = method_source(session, opts.method)?;
    let image_path = latest_checkpoint(&session.paths, Which::Image(ExperimentConfig::regime_for(opts.method)))?;
    let image = ImageModel::from_checkpoint(&load_checked(&image_path, &session.hash)?)?;
    let batch = run_plan(&plan(cfg, opts.method, opts.count, opts.class), &source, &image, &file_name(&image_path))?;
    let samples = session.paths.samples(opts.method, cfg.seed, opts.count);
    let rows: Vec<Vec<f64>> = batch.items.flatten_from(1)?.to_vec2()?;
    write_table(&samples, TableTag::Samples, rows[0].len(), &rows)?;
    let grid_path = session.paths.grid(opts.method, cfg.seed, opts.count);
    match image.cfg.backbone {
        Backbone::Unet => {
            let unit = ((&batch.items + 1.0)? * 0.5)?;
            grid(&tensor_to_images(&unit)?)?.save_png(&grid_path)?;
        }
        Backbone::Mlp => scatter_png(&rows, &grid_path)?,
    }
    let timing = timing_report(&batch);
    let row = ArtifactRow {
        config_hash: &session.hash,
        method: opts.method.flag(),
        seed: cfg.seed,
        count: opts.count,
        samples: file_name(&samples),
        grid: file_name(&grid_path),
        image_checkpoint: file_name(&image_path),
        timing,
    };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(session.paths.artifacts())?;
    writeln!(f, "{}", serde_json::to_string(&row)?)?;
    Ok(SampleOutcome { samples, grid: grid_path, timing, items: batch.items })
}

fn features(data: &Prepared, ex: &FeatureExtractor, items: &Tensor, batch: usize) -> Result<Vec<Vec<f64>>> {
    let n = items.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        out.extend(ex.extract(&data.to_feature_space(&items.narrow(0, start, len)?)?)?);
        start += len;
    }
    Ok(out)
}

/// Reference features, cached under the config hash so every method of the
/// config scores against the same file.
pub fn reference_stats(
    paths: &RunPaths,
    cfg: &ExperimentConfig,
    data: &Prepared,
    ex: &FeatureExtractor,
) -> Result<(PathBuf, GaussianStats)> {
    let kind = serde_json::to_value(ex.kind())?.as_str().unwrap_or("features").to_string();
    let path = paths.reference_features(&kind, data.reference.len());
    let rows = if path.exists() {
        let table = read_table(&path)?;
        if table.tag != TableTag::Features {
            return Err(Error::CacheCorrupt { path, reason: format!("expected a feature table, found {:?}", table.tag) });
        }
        table.rows_f64()
    } else {
        let rows = features(data, ex, &data.items_tensor(&data.reference)?, cfg.sample_batch)?;
        write_table(&path, TableTag::Features, rows[0].len(), &rows)?;
        rows
    };
    let stats = fit_checked(&rows, &cfg.fid(rows.len()))?;
    Ok((path, stats))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub method: Method,
    pub n: usize,
}

/// Score every retained image checkpoint of the method; one metric row each.
pub fn cmd_eval(session: &Session, opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    let cfg = &session.cfg;
    let data = prepare(cfg)?;
    let ex = extractor(cfg)?;
    let (_, reference) = reference_stats(&session.paths, cfg, &data, &ex)?;
    let which = Which::Image(ExperimentConfig::regime_for(opts.method));
    let index = CheckpointIndex::load(&session.paths.index(which))?;
    if index.entries.is_empty() {
        return Err(Error::NotReady(format!("no {} checkpoint for config {}; run `train` first", which.name(), session.hash)));
    }
    let source = method_source(session, opts.method)?;
    let fid = cfg.fid(opts.n);
    let mut rows = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let image = ImageModel::from_checkpoint(&load_checked(&session.paths.dir.join(&entry.file), &session.hash)?)?;
        let items = generate_scored(cfg, &data, opts.method, opts.n, &source, &image, &entry.file)?;
        let mut generate = |start: usize, len: usize| data.to_feature_space(&items.narrow(0, start, len)?);
        let score = fid_protocol(&mut generate, &reference, &ex, &fid)?;
        log::info!("{} step {}: score {:.5}", opts.method.flag(), entry.step, score.score);
        rows.push(MetricRow {
            plan_hash: session.hash.clone(),
            method: opts.method.flag().to_string(),
            step: entry.step,
            n: score.n,
            extractor: serde_json::to_value(score.extractor)?.as_str().unwrap_or_default().to_string(),
            score: score.score,
            seed: cfg.seed,
        });
    }
    append_metric_rows(&session.paths.metrics(), &rows)?;
    Ok(rows)
}

/// Train the models `methods` need and score each at its final checkpoint.
pub fn compare_methods(session: &Session, methods: &[Method]) -> Result<Vec<MetricRow>> {
    let mut trained = Vec::new();
    let mut out = Vec::new();
    for &method in methods {
        let s = Session { cfg: ExperimentConfig { method, ..session.cfg.clone() }, ..session.clone() };
        if method == Method::Vcdm && !trained.contains(&Which::Aux) {
            cmd_train(&s, TrainTarget::Aux, &TrainOptions::default())?;
            trained.push(Which::Aux);
        }
        let which = Which::Image(ExperimentConfig::regime_for(method));
        if !trained.contains(&which) {
            cmd_train(&s, TrainTarget::Image, &TrainOptions::default())?;
            trained.push(which);
        }
        let rows = cmd_eval(&s, &EvalOptions { method, n: s.cfg.eval_n })?;
        out.extend(rows.into_iter().max_by_key(|r| r.step));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: SweepArm,
    pub dim_or_k: usize,
    pub budget: usize,
    pub score: f64,
    pub seed: u64,
    /// Mean squared reconstruction error of the compressed embeddings.
    pub recon_error: f64,
}

/// Compressed conditioning of the training rows for one grid point, its mean
/// squared reconstruction error, the image regime and the sampling source:
/// dataset codes for PCA, the empirical cluster prior for K-means.
fn compress(arm: SweepArm, d: usize, data: &Prepared, seed: u64) -> Result<(Vec<Vec<f64>>, f64, Regime, Source)> {
    let emb = embeddings_of(&data.train.y);
    match arm {
        SweepArm::Pca => {
            let pca = pca_fit(&emb, d)?;
            let ys = emb.iter().map(|e| Ok(pca.apply(e)?.values)).collect::<Result<Vec<_>>>()?;
            let oracle = OracleReference { rows: ys.iter().cloned().zip(data.train.cond.iter().copied()).collect() };
            Ok((ys, pca.reconstruction_error(&emb)?, Regime::Embedding, Source::Oracle(oracle)))
        }
        SweepArm::Kmeans => {
            let cb = kmeans_fit(&emb, d, &mut seeded(split_seed(seed, SWEEP_KMEANS_SEED + d as u64)))?;
            let mut err = 0.0;
            let mut ys = Vec::with_capacity(emb.len());
            for e in &emb {
                let id = cb.assign(e)?;
                err += e.values.iter().zip(&cb.centroids[id]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                ys.push(cb.embed(id, CodeMode::OneHot)?.values);
            }
            let dist = empirical_cluster_distribution(&cb, &emb)?;
            Ok((ys, err / emb.len() as f64, Regime::ClusterId, Source::Prior(cb, dist)))
        }
    }
}

/// For every seed, arm and dimension: compress `y`, train the image model once
/// up to the largest budget and score it when each budget is reached.
pub fn cmd_sweep_dim(session: &Session) -> Result<Vec<SweepRow>> {
    let base = &session.cfg;
    let mut budgets = base.sweep_budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let max_budget = *budgets.last().ok_or_else(|| crate::error::invalid("sweep needs at least one budget"))?;
    let mut out = Vec::new();
    for &seed in &base.sweep_seeds {
        let cfg = base.with_seed(seed);
        let data = prepare(&cfg)?;
        cfg.check_sweep_grid(data.embed_dim)?;
        let ex = extractor(&cfg)?;
        let (_, reference) = reference_stats(&RunPaths::new(&session.paths.dir, &cfg.hash()), &cfg, &data, &ex)?;
        for &arm in &cfg.sweep_arms {
            for &d in &cfg.sweep_dims {
                let (ys, recon_error, regime, source) = compress(arm, d, &data, seed)?;
                let examples = data.train.image_examples(Some(&ys));
                let mcfg = cfg.image_model(regime, d, data.channels(), data.resolution(), data.class_count);
                let train_cfg = crate::train::TrainConfig { steps: max_budget, ..cfg.image_train() };
                let mut t = ImageTrainer::new(&examples, mcfg, train_cfg, None, split_seed(seed, SWEEP_TRAIN_SEED))?;
                for &budget in &budgets {
                    while t.state.step < budget {
                        t.step()?;
                    }
                    let model = t.sampling_model()?;
                    let items = generate_scored(&cfg, &data, Method::VcdmOracle, cfg.eval_n, &source, &model, "sweep")?;
                    let mut generate = |start: usize, len: usize| data.to_feature_space(&items.narrow(0, start, len)?);
                    let score = fid_protocol(&mut generate, &reference, &ex, &cfg.fid(cfg.eval_n))?.score;
                    log::info!("sweep seed {seed} {} {d} budget {budget}: score {score:.5}", arm.name());
                    out.push(SweepRow { arm, dim_or_k: d, budget, score, seed, recon_error });
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(session.paths.sweep())?);
    writeln!(f, "{SWEEP_HEADER}")?;
    for r in &out {
        writeln!(f, "{},{},{},{},{},{}", r.arm.name(), r.dim_or_k, r.budget, r.score, r.seed, r.recon_error)?;
    }
    f.flush()?;
    Ok(out)
}

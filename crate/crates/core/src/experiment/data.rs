//! Materializes the training, held-out and reference sets of a config in
//! model space.

use candle_core::Tensor;

use super::config::{DatasetKind, EmbedderKind, ExperimentConfig};
use crate::aux_model::AuxExample;
use crate::data::{augment, DatasetManifest, Image, Split};
use crate::diffusion::CondInput;
use crate::embedding::{read_table, ClipEmbedder, Embedder, Embedding, ProxyEmbedder, SourceTag};
use crate::error::{Error, Result};
use crate::evaluation::{ExtractorKind, FeatureExtractor};
use crate::image_model::ImageExample;
use crate::rng::{item_rng, seeded, split_seed};

/// Child-seed indices of the ring draws.
pub(crate) const RING_TRAIN: u64 = 10;
const RING_HELDOUT: u64 = 11;
const RING_REFERENCE: u64 = 12;
/// Augmentation streams start here; view `v` of item `i` uses stream `AUG_STREAM + v`.
const AUG_STREAM: u64 = 3;

/// Parallel per-item columns. `aug` rows are empty when labels are unused.
#[derive(Debug, Clone, Default)]
pub struct Rows {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub cond: Vec<CondInput>,
    pub aug: Vec<Vec<f64>>,
}

impl Rows {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn push(&mut self, x: Vec<f64>, y: Vec<f64>, cond: CondInput, aug: Vec<f64>) {
        self.x.push(x);
        self.y.push(y);
        self.cond.push(cond);
        self.aug.push(aug);
    }

    pub fn aux_examples(&self) -> Vec<AuxExample> {
        (0..self.len())
            .map(|i| AuxExample {
                embedding: Embedding { values: self.y[i].clone(), source: SourceTag::Proxy },
                cond: self.cond[i],
                aug: self.aug[i].clone(),
            })
            .collect()
    }

    /// Image examples whose `y` is `ys[i]`, or absent when `ys` is `None`.
    pub fn image_examples(&self, ys: Option<&[Vec<f64>]>) -> Vec<ImageExample> {
        (0..self.len())
            .map(|i| ImageExample {
                x: self.x[i].clone(),
                y: ys.map(|v| v[i].clone()),
                cond: self.cond[i],
                aug: self.aug[i].clone(),
            })
            .collect()
    }
}

pub struct Prepared {
    pub train: Rows,
    pub heldout: Rows,
    /// Reference items for evaluation, in model space.
    pub reference: Vec<Vec<f64>>,
    /// `[channels]` for flat data, `[channels, side, side]` for images.
    pub item_shape: Vec<usize>,
    pub embed_dim: usize,
    pub class_count: Option<usize>,
    /// Mode centers of the ring dataset.
    pub centers: Option<Vec<[f64; 2]>>,
}

impl Prepared {
    pub fn channels(&self) -> usize {
        self.item_shape[0]
    }

    pub fn resolution(&self) -> usize {
        self.item_shape.get(1).copied().unwrap_or(1)
    }

    pub fn is_image(&self) -> bool {
        self.item_shape.len() == 3
    }

    /// `(n, item_shape…)` tensor of model-space items.
    pub fn items_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let mut shape = vec![rows.len()];
        shape.extend(&self.item_shape);
        Ok(Tensor::from_vec(rows.concat(), shape, &candle_core::Device::Cpu)?)
    }

    /// Map model-space items to the space features are computed in: pixel
    /// values in [0, 1] for images, unchanged otherwise.
    pub fn to_feature_space(&self, items: &Tensor) -> Result<Tensor> {
        if self.is_image() {
            Ok(((items + 1.0)? * 0.5)?)
        } else {
            Ok(items.clone())
        }
    }
}

/// Pixel values in [0, 1] to model space [-1, 1].
pub fn to_model_space(img: &Image) -> Vec<f64> {
    img.data.iter().map(|v| 2.0 * v - 1.0).collect()
}

pub fn embedder(cfg: &ExperimentConfig) -> Result<Box<dyn Embedder>> {
    Ok(match cfg.embedder {
        EmbedderKind::Proxy => Box::new(ProxyEmbedder::new(cfg.proxy_dim, 3)?),
        EmbedderKind::Clip => Box::new(ClipEmbedder::from_env()?),
    })
}

pub fn extractor(cfg: &ExperimentConfig) -> Result<FeatureExtractor> {
    Ok(match cfg.eval_extractor {
        ExtractorKind::Identity => FeatureExtractor::Identity,
        ExtractorKind::Proxy => FeatureExtractor::Proxy(ProxyEmbedder::new(ProxyEmbedder::DEFAULT_DIM, 3)?),
        ExtractorKind::InceptionExternal => FeatureExtractor::InceptionExternal,
    })
}

pub fn load_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest.as_ref().ok_or_else(|| Error::Configuration("no manifest path configured".into()))?;
    DatasetManifest::load(path)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    match cfg.dataset {
        DatasetKind::Ring => prepare_ring(cfg),
        DatasetKind::Manifest => prepare_manifest(cfg),
    }
}

fn prepare_ring(cfg: &ExperimentConfig) -> Result<Prepared> {
    let ring = cfg.ring();
    let class = |m: usize| if cfg.class_conditional { CondInput::Class(m as u32) } else { CondInput::Null };
    let rows = |n: usize, child: u64| {
        let d = ring.generate_n(n, &mut seeded(split_seed(cfg.seed, child)));
        let mut out = Rows::default();
        for i in 0..d.len() {
            out.push(d.points[i].to_vec(), d.embeddings[i].values.clone(), class(d.modes[i]), Vec::new());
        }
        out
    };
    let reference = ring.generate_n(cfg.ring_reference, &mut seeded(split_seed(cfg.seed, RING_REFERENCE)));
    Ok(Prepared {
        train: rows(cfg.ring_count, RING_TRAIN),
        heldout: rows(cfg.ring_holdout.max(1), RING_HELDOUT),
        reference: reference.rows(),
        item_shape: vec![2],
        embed_dim: ring.modes,
        class_count: cfg.class_conditional.then_some(ring.modes),
        centers: Some(ring.centers()),
    })
}

fn prepare_manifest(cfg: &ExperimentConfig) -> Result<Prepared> {
    let manifest = load_manifest(cfg)?;
    let cache = manifest.cache_path().ok_or_else(|| Error::Configuration("manifest has no embedding_cache".into()))?;
    if !manifest.cache_complete()? {
        return Err(Error::NotReady(format!("embedding cache {} is incomplete; run cache-embeddings first", cache.display())));
    }
    let table = read_table(&cache)?;
    let ys = table.rows_f64();
    let embed_dim = table.dim;
    let first = manifest.rows.first().ok_or_else(|| Error::Configuration("manifest has no rows".into()))?;
    let [channels, h, w] = first.shape;
    if h != w || manifest.rows.iter().any(|r| r.shape != first.shape) {
        return Err(Error::Configuration("manifest images must share one square shape".into()));
    }
    let class_count = if cfg.class_conditional {
        let mut max = 0;
        for (i, r) in manifest.rows.iter().enumerate() {
            let c = r.class.ok_or_else(|| Error::Configuration(format!("row {i} has no class but class_conditional is set")))?;
            max = max.max(c as usize + 1);
        }
        Some(max)
    } else {
        None
    };
    let cond = |i: usize| match (cfg.class_conditional, manifest.rows[i].class) {
        (true, Some(c)) => CondInput::Class(c),
        _ => CondInput::Null,
    };
    let label_dim = cfg.aug_label_dim();
    let aug_cfg = cfg.augment();
    let emb = if cfg.aug_views > 0 { Some(embedder(cfg)?) } else { None };
    let mut train = Rows::default();
    for i in manifest.indices(Split::Train) {
        let img = manifest.load_image(i)?;
        train.push(to_model_space(&img), ys[i].clone(), cond(i), vec![0.0; label_dim]);
        if let Some(e) = &emb {
            for v in 0..cfg.aug_views {
                let (aug_img, label) = augment(&img, &aug_cfg, &mut item_rng(cfg.seed, i as u64, AUG_STREAM + v as u64));
                train.push(to_model_space(&aug_img), e.embed(&aug_img)?.values, cond(i), label.encode(aug_cfg.buckets));
            }
        }
    }
    let mut heldout = Rows::default();
    for i in manifest.indices(Split::Test) {
        heldout.push(to_model_space(&manifest.load_image(i)?), ys[i].clone(), cond(i), vec![0.0; label_dim]);
    }
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Configuration("manifest needs both train and test rows".into()));
    }
    Ok(Prepared {
        reference: heldout.x.clone(),
        train,
        heldout,
        item_shape: vec![channels, h, w],
        embed_dim,
        class_count,
        centers: None,
    })
}

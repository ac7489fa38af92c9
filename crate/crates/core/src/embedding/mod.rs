//! Semantic embeddings `y = e(x)`: embedder backends, PCA compression,
//! K-means discretization, and the on-disk embedding table.

mod cache;
mod clip;
mod kmeans;
mod pca;
mod proxy;

pub use cache::{read_table, read_table_header, write_table, Table, TableHeader, TableTag, TABLE_MAGIC, TABLE_VERSION};
pub use clip::{ClipEmbedder, ClipVisionConfig, CLIP_WEIGHTS_ENV};
pub use kmeans::{empirical_cluster_distribution, kmeans_fit, CodeMode, KMeansCodebook, KMeansSettings};
pub use pca::{pca_fit, PcaTransform};
pub use proxy::ProxyEmbedder;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    ClipVitB32,
    Proxy,
    PcaK,
    KmeansOnehot,
}

/// Raw, unnormalized embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: SourceTag,
}

impl Embedding {
    pub fn new(values: Vec<f64>, source: SourceTag) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("embedding coordinate {i} is not finite")));
        }
        Ok(Self { values, source })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Image embedder backend. Implementations are deterministic functions of the
/// pixel values.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn tag(&self) -> SourceTag;
    fn embed(&self, image: &Image) -> Result<Embedding>;
}

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(invalid(format!("{what}: expected dimension {expected}, got {got}")))
    }
}

//! Artifact paths and checkpoint retention. Every file name carries the config
//! hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image_model::Regime;
use crate::pipeline::Method;

/// Which model a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Which {
    Aux,
    Image(Regime),
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Aux => "aux",
            Which::Image(Regime::Unconditional) => "image-unconditional",
            Which::Image(Regime::Embedding) => "image-embedding",
            Which::Image(Regime::ClusterId) => "image-cluster",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub hash: String,
}

impl RunPaths {
    pub fn new(dir: &Path, hash: &str) -> Self {
        Self { dir: dir.to_path_buf(), hash: hash.to_string() }
    }

    fn named(&self, stem: &str, suffix: &str) -> PathBuf {
        self.dir.join(format!("{stem}-{}{suffix}", self.hash))
    }

    pub fn embeddings(&self) -> PathBuf {
        self.named("embeddings", ".bin")
    }

    pub fn checkpoint(&self, which: Which, step: usize) -> PathBuf {
        self.named(which.name(), &format!("-step{step:07}.ckpt"))
    }

    pub fn index(&self, which: Which) -> PathBuf {
        self.named(which.name(), "-index.json")
    }

    pub fn loss_csv(&self, which: Which) -> PathBuf {
        self.named(which.name(), "-loss.csv")
    }

    pub fn codebook(&self) -> PathBuf {
        self.named("codebook", ".json")
    }

    pub fn reference_features(&self, extractor: &str, n: usize) -> PathBuf {
        self.named("reference", &format!("-{extractor}-n{n}.bin"))
    }

    fn sample_stem(&self, method: Method, seed: u64, count: usize) -> String {
        format!("-{}-seed{seed}-n{count}", method.flag())
    }

    pub fn samples(&self, method: Method, seed: u64, count: usize) -> PathBuf {
        self.named("samples", &format!("{}.bin", self.sample_stem(method, seed, count)))
    }

    pub fn grid(&self, method: Method, seed: u64, count: usize) -> PathBuf {
        self.named("grid", &format!("{}.png", self.sample_stem(method, seed, count)))
    }

    pub fn artifacts(&self) -> PathBuf {
        self.named("artifacts", ".jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.named("metrics", ".csv")
    }

    pub fn sweep(&self) -> PathBuf {
        self.named("sweep", ".csv")
    }

    pub fn config(&self) -> PathBuf {
        self.named("config", ".toml")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub step: usize,
    pub file: String,
    pub heldout_loss: f64,
}

/// Retained checkpoints of one model, ordered by step, plus the best by
/// held-out loss.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub entries: Vec<IndexEntry>,
    pub best: Option<IndexEntry>,
}

impl CheckpointIndex {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.partial");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn latest(&self) -> Option<&IndexEntry> {
        self.entries.last()
    }

    /// Record a new checkpoint and return the files no longer retained: all
    /// but the last `keep_last` entries, except the best.
    pub fn record(&mut self, entry: IndexEntry, keep_last: usize) -> Vec<String> {
        self.entries.retain(|e| e.step != entry.step);
        if self.best.as_ref().is_none_or(|b| entry.heldout_loss < b.heldout_loss || b.step == entry.step) {
            self.best = Some(entry.clone());
        }
        self.entries.push(entry);
        self.entries.sort_by_key(|e| e.step);
        let best_step = self.best.as_ref().map(|b| b.step);
        let cut = self.entries.len().saturating_sub(keep_last);
        let mut dropped = Vec::new();
        let mut kept = Vec::new();
        for (i, e) in self.entries.drain(..).enumerate() {
            if i >= cut || Some(e.step) == best_step {
                kept.push(e);
            } else {
                dropped.push(e.file);
            }
        }
        self.entries = kept;
        dropped
    }
}

/// Most recent checkpoint of `which`, or not-ready when none exists.
pub fn latest_checkpoint(paths: &RunPaths, which: Which) -> Result<PathBuf> {
    let index = CheckpointIndex::load(&paths.index(which))?;
    let entry = index.latest().ok_or_else(|| {
        Error::NotReady(format!("no {} checkpoint for config {}; run `train` first", which.name(), paths.hash))
    })?;
    Ok(paths.dir.join(&entry.file))
}

/// Refuse checkpoints written under a different config.
pub fn check_hash(ckpt: &Checkpoint, expected: &str) -> Result<()> {
    let found = ckpt.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("none");
    if found != expected {
        return Err(Error::ConfigMismatch { expected: expected.to_string(), found: found.to_string() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(step: usize, loss: f64) -> IndexEntry {
        IndexEntry { step, file: format!("s{step}"), heldout_loss: loss }
    }

    #[test]
    fn keeps_last_three_and_best() {
        let mut idx = CheckpointIndex::default();
        let mut dropped = Vec::new();
        for (step, loss) in [(500, 0.5), (1000, 0.1), (1500, 0.3), (2000, 0.4), (2500, 0.6)] {
            dropped.extend(idx.record(entry(step, loss), 3));
        }
        let steps: Vec<usize> = idx.entries.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![1000, 1500, 2000, 2500]);
        assert_eq!(idx.best.as_ref().unwrap().step, 1000);
        assert_eq!(dropped, vec!["s500".to_string()]);
    }

    #[test]
    fn file_names_embed_the_hash() {
        let p = RunPaths::new(Path::new("out"), "abc123");
        for path in [
            p.embeddings(),
            p.checkpoint(Which::Aux, 5),
            p.index(Which::Image(Regime::Embedding)),
            p.samples(Method::Vcdm, 1, 4),
            p.grid(Method::ClassCond, 1, 4),
            p.metrics(),
            p.sweep(),
        ] {
            assert!(path.to_string_lossy().contains("abc123"), "{}", path.display());
        }
        assert_eq!(p.checkpoint(Which::Aux, 5), Path::new("out/aux-abc123-step0000005.ckpt"));
    }

    #[test]
    fn missing_index_is_not_ready() {
        let dir = tempfile::tempdir().unwrap();
        let p = RunPaths::new(dir.path(), "h");
        assert!(matches!(latest_checkpoint(&p, Which::Aux), Err(Error::NotReady(_))));
    }
}

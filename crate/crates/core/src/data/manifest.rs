//! Line-delimited dataset manifest. The optional first line is a header object
//! naming the embedding cache; every other line is one image record.
//!
//! ```text
//! {"embedding_cache":"embeddings.bin"}
//! {"path":"img/000.png","shape":[3,16,16],"class":2,"split":"train"}
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Image;
use crate::embedding::read_table_header;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    embedding_cache: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
    pub embedding_cache: Option<PathBuf>,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut embedding_cache = None;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 {
                if let Ok(h) = serde_json::from_str::<Header>(line) {
                    embedding_cache = Some(h.embedding_cache);
                    continue;
                }
            }
            let row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            rows.push(row);
        }
        Ok(Self { root, embedding_cache, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(cache) = &self.embedding_cache {
            writeln!(f, "{}", serde_json::to_string(&Header { embedding_cache: cache.clone() })?)?;
        }
        for row in &self.rows {
            writeln!(f, "{}", serde_json::to_string(row)?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_image(&self, index: usize) -> Result<Image> {
        let row = self.rows.get(index).ok_or_else(|| invalid(format!("manifest has no row {index}")))?;
        let img = Image::load(&self.resolve(&row.path))?;
        if img.shape() != row.shape {
            return Err(invalid(format!("{}: decoded shape {:?}, manifest says {:?}", row.path.display(), img.shape(), row.shape)));
        }
        Ok(img)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.rows.iter().enumerate().filter(|(_, r)| r.split == split).map(|(i, _)| i).collect()
    }

    pub fn cache_path(&self) -> Option<PathBuf> {
        self.embedding_cache.as_ref().map(|p| self.resolve(p))
    }

    /// A cache is complete when it exists, has a valid header and holds one row per image.
    pub fn cache_complete(&self) -> Result<bool> {
        let Some(path) = self.cache_path() else { return Ok(false) };
        if !path.exists() {
            return Ok(false);
        }
        Ok(read_table_header(&path)?.count as usize == self.rows.len())
    }
}

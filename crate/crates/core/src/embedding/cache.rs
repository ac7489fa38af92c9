//! Flat binary table used for embedding caches, reference-feature caches and
//! sample tensor dumps.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   [u8; 4]  "VCDT"
//! version u32      1
//! count   u64      number of rows
//! dim     u32      values per row
//! tag     u32      TableTag code
//! rows    f32 × count × dim, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SourceTag;
use crate::error::{Error, Result};

pub const TABLE_MAGIC: [u8; 4] = *b"VCDT";
pub const TABLE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableTag {
    Embedding(SourceTag),
    Samples,
    Features,
}

impl TableTag {
    pub fn code(self) -> u32 {
        match self {
            TableTag::Embedding(SourceTag::ClipVitB32) => 1,
            TableTag::Embedding(SourceTag::Proxy) => 2,
            TableTag::Embedding(SourceTag::PcaK) => 3,
            TableTag::Embedding(SourceTag::KmeansOnehot) => 4,
            TableTag::Samples => 16,
            TableTag::Features => 17,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            1 => TableTag::Embedding(SourceTag::ClipVitB32),
            2 => TableTag::Embedding(SourceTag::Proxy),
            3 => TableTag::Embedding(SourceTag::PcaK),
            4 => TableTag::Embedding(SourceTag::KmeansOnehot),
            16 => TableTag::Samples,
            17 => TableTag::Features,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableHeader {
    pub version: u32,
    pub count: u64,
    pub dim: u32,
    pub tag: TableTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub tag: TableTag,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl Table {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.dim.max(1)).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }
}

pub fn write_table(path: &Path, tag: TableTag, dim: usize, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TABLE_MAGIC)?;
    w.write_all(&TABLE_VERSION.to_le_bytes())?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&tag.code().to_le_bytes())?;
    for row in rows {
        if row.len() != dim {
            return Err(crate::error::invalid(format!("table row of length {} in a dim-{dim} table", row.len())));
        }
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CacheCorrupt { path: path.to_path_buf(), reason: reason.into() }
}

fn parse_header(path: &Path, buf: &[u8; HEADER_LEN as usize]) -> Result<TableHeader> {
    if buf[0..4] != TABLE_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != TABLE_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(buf[16..20].try_into().unwrap());
    let code = u32::from_le_bytes(buf[20..24].try_into().unwrap());
    let tag = TableTag::from_code(code).ok_or_else(|| corrupt(path, format!("unknown tag {code}")))?;
    Ok(TableHeader { version, count, dim, tag })
}

/// Read and validate only the header, including that the file length matches.
pub fn read_table_header(path: &Path) -> Result<TableHeader> {
    let mut f = File::open(path)?;
    let mut buf = [0u8; HEADER_LEN as usize];
    f.read_exact(&mut buf).map_err(|_| corrupt(path, "truncated header"))?;
    let header = parse_header(path, &buf)?;
    let expected = HEADER_LEN + header.count * header.dim as u64 * 4;
    let actual = f.metadata()?.len();
    if actual != expected {
        return Err(corrupt(path, format!("file is {actual} bytes, header implies {expected}")));
    }
    Ok(header)
}

pub fn read_table(path: &Path) -> Result<Table> {
    let header = read_table_header(path)?;
    let mut r = BufReader::new(File::open(path)?);
    let mut skip = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut skip)?;
    let n = header.count as usize * header.dim as usize;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| corrupt(path, "truncated body"))?;
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Table { tag: header.tag, dim: header.dim as usize, values })
}

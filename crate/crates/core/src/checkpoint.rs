//! Single-file checkpoint container: a JSON metadata block followed by raw
//! little-endian f64 tensor data.
//!
//! ```text
//! magic    [u8; 4]  "VCKP"
//! version  u32      1
//! head_len u64      length of the JSON header
//! header   JSON     { "meta": …, "tensors": [ { "name", "shape" }, … ] }
//! data     f64 LE, tensors concatenated in header order
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"VCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert_group(&mut self, prefix: &str, group: &BTreeMap<String, Tensor>) {
        for (k, v) in group {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect(),
        };
        let head = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(head.len() as u64).to_le_bytes())?;
            w.write_all(&head)?;
            for t in self.tensors.values() {
                let values: Vec<f64> = t.flatten_all()?.to_vec1()?;
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::IncompatibleCheckpoint(format!("{}: {reason}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotReady(format!("checkpoint {} does not exist", path.display()))
            } else {
                e.into()
            }
        })?);
        let mut fixed = [0u8; 16];
        r.read_exact(&mut fixed).map_err(|_| bad("truncated"))?;
        if fixed[0..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        if u32::from_le_bytes(fixed[4..8].try_into().unwrap()) != VERSION {
            return Err(bad("unsupported version"));
        }
        let head_len = u64::from_le_bytes(fixed[8..16].try_into().unwrap()) as usize;
        let mut head = vec![0u8; head_len];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&head)?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated tensor data"))?;
            let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?);
        }
        Ok(Self { meta: header.meta, tensors })
    }
}

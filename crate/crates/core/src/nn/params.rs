use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::rng::{normal_vec, Rng};

/// Working precision for every model in the crate. Double precision keeps
/// finite-difference gradient checks meaningful.
pub const DTYPE: DType = DType::F64;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// U(-b, b) with b = 1/sqrt(fan_in).
    FanIn(usize),
}

/// Named trainable tensors, ordered by name.
#[derive(Default, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store holding detached copies of `tensors`.
    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name.clone(), Var::from_tensor(&t.copy()?)?);
        }
        Ok(Self { vars })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&value)?;
        self.vars.insert(name.into(), var.clone());
        Ok(var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrite values in place. Names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let src = values.get(name).ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("missing tensor {name}"))
            })?;
            if src.dims() != var.dims() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(src)?;
        }
        Ok(())
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut Rng) -> Builder<'a> {
        Builder { store: self, rng, prefix: String::new() }
    }
}

/// Creates parameters on first request and returns existing ones when the
/// store already holds them, so the same constructor both initializes a fresh
/// model and rebuilds one around loaded weights.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl Builder<'_> {
    pub fn pp(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if let Some(var) = self.store.get(&full) {
            if var.dims() != shape {
                return Err(invalid(format!(
                    "parameter {full} has shape {:?}, expected {shape:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => normal_vec(self.rng, n).into_iter().map(|z| z * std).collect(),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        Ok(self.store.insert(full, t)?.as_tensor().clone())
    }
}

pub fn scalar_tensor(v: f64) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?)
}

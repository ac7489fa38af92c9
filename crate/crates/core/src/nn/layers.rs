use candle_core::{Device, Tensor, D};

use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = b.get("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?;
        let bias = Some(b.get("bias", &[out_dim], Init::FanIn(in_dim))?);
        Ok(Self { weight, bias })
    }

    pub fn with_init(b: &mut Builder, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = b.get("weight", &[out_dim, in_dim], init)?;
        let bias = Some(b.get("bias", &[out_dim], init)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = b.get("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input needs a feature axis");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self { gamma: b.get("gamma", &[dim], Init::Ones)?, beta: b.get("beta", &[dim], Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xn = normalize_last(x, 1e-5)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, channels: usize, groups: usize) -> Result<Self> {
        let groups = gcd(groups, channels);
        Ok(Self {
            groups,
            gamma: b.get("gamma", &[channels], Init::Ones)?,
            beta: b.get("beta", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, c, h, w) = x.dims4()?;
        let grouped = x.reshape((batch, self.groups, (c / self.groups) * h * w))?;
        let xn = normalize_last(&grouped, 1e-5)?.reshape((batch, c, h, w))?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(xn.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Self::with_init(b, in_c, out_c, kernel, Init::FanIn(in_c * kernel * kernel))
    }

    pub fn with_init(b: &mut Builder, in_c: usize, out_c: usize, kernel: usize, init: Init) -> Result<Self> {
        let weight = b.get("weight", &[out_c, in_c, kernel, kernel], init)?;
        let bias = b.get("bias", &[out_c], init)?;
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Sinusoidal features of a per-item scalar: `[cos(f_j·c), sin(f_j·c)]` with
/// frequencies geometrically spaced over [1, 100].
pub fn sinusoidal(c: &Tensor, dim: usize) -> Result<Tensor> {
    let half = (dim / 2).max(1);
    let freqs: Vec<f64> = (0..half)
        .map(|j| {
            let t = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
            (t * 100f64.ln()).exp()
        })
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), &Device::Cpu)?;
    let n = c.dim(0)?;
    let args = c.reshape((n, 1))?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
}

/// Multi-head self-attention over `(batch, tokens, width)`.
#[derive(Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::error::invalid(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self { qkv: Linear::new(&mut b.pp("qkv"), width, 3 * width)?, out: Linear::new(&mut b.pp("out"), width, width)?, heads })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, tokens, width) = x.dims3()?;
        let head_dim = width / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((batch, tokens, 3, self.heads, head_dim))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
        let att = softmax_last(&scores)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((batch, tokens, width))?;
        self.out.forward(&y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use crate::rng::seeded;

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let ln = LayerNorm::new(&mut store.builder(&mut rng), 6).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0, 5.0, 9.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean = y.iter().sum::<f64>() / 6.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_preserves_shape_and_softmax_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let att = SelfAttention::new(&mut store.builder(&mut rng), 8, 2).unwrap();
        let x = Tensor::from_vec(crate::rng::normal_vec(&mut rng, 3 * 5 * 8), (3, 5, 8), &Device::Cpu).unwrap();
        assert_eq!(att.forward(&x).unwrap().dims(), &[3, 5, 8]);
        let s: Vec<f64> = softmax_last(&x).unwrap().sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}

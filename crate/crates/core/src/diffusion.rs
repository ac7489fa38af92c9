//! Noise schedules, forward corruption, the weighted denoising objective,
//! preconditioning and the stochastic Heun sampler. Shared by the embedding
//! prior and the image model.

use candle_core::{Device, Tensor, D};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::Builder;
use crate::rng::{NoiseSource, Rng};

/// Positive noise standard deviation, in data units.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NoiseLevel(pub f64);

impl NoiseLevel {
    pub fn sigma(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub num_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { sigma_min: 0.002, sigma_max: 80.0, rho: 7.0, num_steps: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub stochastic: bool,
}

impl Default for SamplerConfig {
    /// The image-space setting: 40 steps, S_churn = 50, S_noise = 1.007.
    fn default() -> Self {
        Self { num_steps: 40, s_churn: 50.0, s_noise: 1.007, s_tmin: 0.05, s_tmax: 50.0, stochastic: true }
    }
}

impl SamplerConfig {
    /// Plain Heun ODE solve with no noise re-injection.
    pub fn deterministic(num_steps: usize) -> Self {
        Self { num_steps, s_churn: 0.0, stochastic: false, ..Self::default() }
    }

    fn churn_gamma(&self, sigma: f64) -> f64 {
        if !self.stochastic || self.s_churn <= 0.0 || sigma < self.s_tmin || sigma > self.s_tmax {
            return 0.0;
        }
        (self.s_churn / self.num_steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
    }
}

/// Training-time noise distribution and loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeighting {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for LossWeighting {
    fn default() -> Self {
        Self { sigma_data: 0.5, p_mean: -1.2, p_std: 1.2 }
    }
}

impl LossWeighting {
    /// λ(σ) = (σ² + σ_d²) / (σ·σ_d)².
    pub fn lambda(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
    }
}

/// `x + sigma·eps`.
pub fn corrupt(x: &Tensor, sigma: NoiseLevel, eps: &Tensor) -> Result<Tensor> {
    if x.dims() != eps.dims() {
        return Err(invalid(format!("noise shape {:?} does not match data shape {:?}", eps.dims(), x.dims())));
    }
    Ok((x + (eps * sigma.0)?)?)
}

/// Per-item corruption: row `i` of `x` gets noise level `sigmas[i]`.
pub fn corrupt_batch(x: &Tensor, sigmas: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x.dims() != eps.dims() {
        return Err(invalid(format!("noise shape {:?} does not match data shape {:?}", eps.dims(), x.dims())));
    }
    Ok((x + eps.broadcast_mul(&per_item(sigmas, x.rank())?)?)?)
}

/// Reshape a `(batch,)` vector to broadcast against a rank-`rank` batch.
pub(crate) fn per_item(v: &Tensor, rank: usize) -> Result<Tensor> {
    let mut shape = vec![v.dim(0)?];
    shape.resize(rank, 1);
    Ok(v.reshape(shape)?)
}

/// Draw σ with ln σ ~ Normal(p_mean, p_std²).
pub fn sample_train_sigma(weighting: &LossWeighting, rng: &mut Rng) -> NoiseLevel {
    let z: f64 = rand_distr::StandardNormal.sample(rng);
    NoiseLevel((weighting.p_mean + weighting.p_std * z).exp())
}

/// Descending noise levels `σ_0 = sigma_max … σ_{N−1} = sigma_min`, followed by a terminal 0.
pub fn build_sigma_schedule(cfg: &ScheduleConfig) -> Result<Vec<f64>> {
    if cfg.num_steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(cfg.sigma_min > 0.0 && cfg.sigma_min < cfg.sigma_max && cfg.rho > 0.0) {
        return Err(invalid(format!(
            "schedule requires 0 < sigma_min < sigma_max and rho > 0, got {cfg:?}"
        )));
    }
    let n = cfg.num_steps;
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let s = if i == 0 {
            cfg.sigma_max
        } else if i == n - 1 {
            cfg.sigma_min
        } else {
            (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(cfg.rho)
        };
        out.push(s);
    }
    out.push(0.0);
    Ok(out)
}

/// RMS deviation of the data about its per-coordinate mean; rows are items.
pub fn estimate_sigma_data(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n == 0 {
        return Err(invalid("cannot estimate sigma_data from an empty dataset"));
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let ss: f64 = rows.iter().flat_map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m).powi(2))).sum();
    let sd = (ss / (n * d) as f64).sqrt();
    if sd > 0.0 && sd.is_finite() {
        Ok(sd)
    } else {
        Err(invalid(format!("degenerate data scale {sd}")))
    }
}

/// Light conditioning `a`: nothing, or a class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CondInput {
    #[default]
    Null,
    Class(u32),
}

impl CondInput {
    /// Class tensor for a batch that must be uniformly null or uniformly labelled.
    pub fn batch_classes(items: &[CondInput]) -> Result<Option<Tensor>> {
        match items.first() {
            None | Some(CondInput::Null) => {
                if items.iter().any(|a| *a != CondInput::Null) {
                    return Err(invalid("batch mixes null and class conditioning"));
                }
                Ok(None)
            }
            Some(CondInput::Class(_)) => {
                let ids = items
                    .iter()
                    .map(|a| match a {
                        CondInput::Class(c) => Ok(*c),
                        CondInput::Null => Err(invalid("batch mixes null and class conditioning")),
                    })
                    .collect::<Result<Vec<u32>>>()?;
                let n = ids.len();
                Ok(Some(Tensor::from_vec(ids, n, &Device::Cpu)?))
            }
        }
    }
}

/// Per-batch conditioning. `embedding` is `(batch, dim)`, `class` is `(batch,)`
/// of `u32`, `aug` is `(batch, label_dim)`.
#[derive(Clone, Default)]
pub struct Conditioning {
    pub embedding: Option<Tensor>,
    pub class: Option<Tensor>,
    pub aug: Option<Tensor>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn select(&self, idx: &Tensor) -> Result<Self> {
        let pick = |t: &Option<Tensor>| -> Result<Option<Tensor>> {
            t.as_ref().map(|t| Ok(t.index_select(idx, 0)?)).transpose()
        };
        Ok(Self { embedding: pick(&self.embedding)?, class: pick(&self.class)?, aug: pick(&self.aug)? })
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let pick = |t: &Option<Tensor>| -> Result<Option<Tensor>> {
            t.as_ref().map(|t| Ok(t.narrow(0, start, len)?)).transpose()
        };
        Ok(Self { embedding: pick(&self.embedding)?, class: pick(&self.class)?, aug: pick(&self.aug)? })
    }
}

/// A map `(x_σ, σ, cond) → x̂` predicting clean data. `sigma` is `(batch,)`.
pub trait Denoiser {
    fn denoise(&self, x_sigma: &Tensor, sigma: &Tensor, cond: &Conditioning) -> Result<Tensor>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn denoise(&self, x_sigma: &Tensor, sigma: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        (**self).denoise(x_sigma, sigma, cond)
    }
}

/// Raw network `F(c_in·x_σ, c_noise, cond)` before preconditioning.
pub trait RawNet {
    fn forward(&self, x_in: &Tensor, c_noise: &Tensor, cond: &Conditioning) -> Result<Tensor>;
}

/// Preconditioning coefficients for one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn at(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// `x̂ = c_skip·x_σ + c_out·F(c_in·x_σ, c_noise)`.
pub struct Preconditioned<N> {
    pub net: N,
    pub sigma_data: f64,
}

pub fn precondition<N: RawNet>(raw_net: N, sigma_data: f64) -> Result<Preconditioned<N>> {
    if !(sigma_data > 0.0) {
        return Err(invalid(format!("sigma_data must be positive, got {sigma_data}")));
    }
    Ok(Preconditioned { net: raw_net, sigma_data })
}

impl<N: RawNet> Denoiser for Preconditioned<N> {
    fn denoise(&self, x_sigma: &Tensor, sigma: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let sd = self.sigma_data;
        let sd2 = sd * sd;
        let s2 = (sigma.sqr()? + sd2)?;
        let rank = x_sigma.rank();
        let c_skip = per_item(&(s2.recip()? * sd2)?, rank)?;
        let c_out = per_item(&(sigma.broadcast_div(&s2.sqrt()?)? * sd)?, rank)?;
        let c_in = per_item(&s2.sqrt()?.recip()?, rank)?;
        let c_noise = (sigma.log()? / 4.0)?;
        let f = self.net.forward(&x_sigma.broadcast_mul(&c_in)?, &c_noise, cond)?;
        Ok((x_sigma.broadcast_mul(&c_skip)? + f.broadcast_mul(&c_out)?)?)
    }
}

/// Per-item `λ(σ_i)·‖x_i − x̂_i‖²` at fixed noise levels and noise draws.
pub fn weighted_errors(
    model: &dyn Denoiser,
    x: &Tensor,
    cond: &Conditioning,
    sigmas: &[f64],
    eps: &Tensor,
    weighting: &LossWeighting,
) -> Result<Tensor> {
    let batch = x.dim(0)?;
    if sigmas.len() != batch {
        return Err(invalid(format!("{} noise levels for a batch of {batch}", sigmas.len())));
    }
    let sig = Tensor::from_slice(sigmas, batch, x.device())?;
    let x_sigma = corrupt_batch(x, &sig, eps)?;
    let x_hat = model.denoise(&x_sigma, &sig, cond)?;
    let sq = (x - x_hat)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?;
    let lambdas: Vec<f64> = sigmas.iter().map(|&s| weighting.lambda(s)).collect();
    let weighted = (sq * Tensor::from_vec(lambdas, batch, x.device())?)?;
    let values: Vec<f64> = weighted.detach().to_vec1()?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAtSigma { sigma: sigmas[i], context: format!("non-finite denoiser output for batch item {i}") });
    }
    Ok(weighted)
}

/// One-sample Monte Carlo estimate of the weighted denoising objective: per item
/// draw σ ~ u(σ) and ε, corrupt, denoise, and average `λ(σ)·‖x − x̂‖²` over the batch.
/// The returned scalar tensor is differentiable w.r.t. model parameters.
pub fn denoising_loss(
    model: &dyn Denoiser,
    x: &Tensor,
    cond: &Conditioning,
    weighting: &LossWeighting,
    rng: &mut Rng,
) -> Result<Tensor> {
    let batch = x.dim(0)?;
    let sigmas: Vec<f64> = (0..batch).map(|_| sample_train_sigma(weighting, rng).0).collect();
    let eps = rng.normal(x.dims(), x.device())?;
    Ok(weighted_errors(model, x, cond, &sigmas, &eps, weighting)?.mean_all()?)
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    let values: Vec<f64> = x.flatten_all()?.to_vec1()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteAtStep { step, context: "sampler state became non-finite".into() })
    }
}

/// Stochastic Heun integration of the probability-flow dynamics with optional
/// noise re-injection ("churn"). `sampler.num_steps` sets the step count; the
/// remaining schedule constants come from `schedule`. `shape` includes the batch.
pub fn sample(
    model: &dyn Denoiser,
    cond: &Conditioning,
    shape: &[usize],
    sampler: &SamplerConfig,
    schedule: &ScheduleConfig,
    noise: &mut dyn NoiseSource,
) -> Result<Tensor> {
    let sigmas = build_sigma_schedule(&ScheduleConfig { num_steps: sampler.num_steps, ..*schedule })?;
    let dev = Device::Cpu;
    let batch = *shape.first().ok_or_else(|| invalid("sample shape needs a batch axis"))?;
    let at = |s: f64| Tensor::full(s, batch, &dev);

    let mut x = (noise.normal(shape, &dev)? * sigmas[0])?;
    for (i, pair) in sigmas.windows(2).enumerate() {
        let (cur, next) = (pair[0], pair[1]);
        let gamma = sampler.churn_gamma(cur);
        let hat = cur * (1.0 + gamma);
        let x_hat = if gamma > 0.0 {
            let extra = (hat * hat - cur * cur).sqrt() * sampler.s_noise;
            (&x + (noise.normal(shape, &dev)? * extra)?)?
        } else {
            x
        };
        let denoised = model.denoise(&x_hat, &at(hat)?, cond)?;
        let d = ((&x_hat - &denoised)? / hat)?;
        // x̂ + (σ_next − σ̂)·d, written as D + σ_next·d so that a step to σ = 0
        // lands exactly on the denoiser output.
        let mut x_next = (&denoised + (&d * next)?)?;
        if next > 0.0 {
            let denoised_next = model.denoise(&x_next, &at(next)?, cond)?;
            let d_next = ((&x_next - denoised_next)? / next)?;
            x_next = (&x_hat + ((d + d_next)? * (0.5 * (next - hat)))?)?;
        }
        check_finite(&x_next, i)?;
        x = x_next.detach();
    }
    Ok(x)
}

/// Denoiser backed by a closure; used for analytic models and tests.
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&Tensor, &Tensor, &Conditioning) -> Result<Tensor>,
{
    fn denoise(&self, x_sigma: &Tensor, sigma: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        (self.0)(x_sigma, sigma, cond)
    }
}

/// Exact posterior mean for data ~ Normal(0, s²·I): `x̂ = s²·x_σ / (s² + σ²)`.
pub struct GaussianOptimalDenoiser {
    pub data_var: f64,
}

impl Denoiser for GaussianOptimalDenoiser {
    fn denoise(&self, x_sigma: &Tensor, sigma: &Tensor, _cond: &Conditioning) -> Result<Tensor> {
        let scale = ((sigma.sqr()? + self.data_var)?.recip()? * self.data_var)?;
        Ok(x_sigma.broadcast_mul(&per_item(&scale, x_sigma.rank())?)?)
    }
}

/// Learned sinusoidal embedding of `c_noise` used by both model families.
pub(crate) fn noise_embedding(b: &mut Builder, width: usize) -> Result<NoiseEmbed> {
    Ok(NoiseEmbed {
        fc1: crate::nn::Linear::new(&mut b.pp("fc1"), width, width)?,
        fc2: crate::nn::Linear::new(&mut b.pp("fc2"), width, width)?,
        width,
    })
}

#[derive(Clone)]
pub(crate) struct NoiseEmbed {
    fc1: crate::nn::Linear,
    fc2: crate::nn::Linear,
    width: usize,
}

impl NoiseEmbed {
    pub(crate) fn forward(&self, c_noise: &Tensor) -> Result<Tensor> {
        let f = crate::nn::sinusoidal(c_noise, self.width)?;
        self.fc2.forward(&self.fc1.forward(&f)?.silu()?)
    }
}

/// Normal(0, sd²) sampler helper for tests and toy data.
pub fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite normal parameters")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn corrupt_zero_noise_is_identity() {
        let x = t(&[1.0, -2.0, 3.5], &[3]);
        let eps = t(&[0.3, 0.1, -0.7], &[3]);
        assert_eq!(v(&corrupt(&x, NoiseLevel(0.0), &eps).unwrap()), v(&x));
    }

    #[test]
    fn corrupt_zero_data_is_scaled_noise() {
        let x = t(&[0.0; 4], &[2, 2]);
        let eps = t(&[0.3, 0.1, -0.7, 2.0], &[2, 2]);
        assert_eq!(v(&corrupt(&x, NoiseLevel(2.0), &eps).unwrap()), vec![0.6, 0.2, -1.4, 4.0]);
    }

    #[test]
    fn corrupt_rejects_shape_mismatch() {
        let err = corrupt(&t(&[0.0; 4], &[4]), NoiseLevel(1.0), &t(&[0.0; 3], &[3])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn corrupt_noise_has_sigma_spread() {
        let mut rng = seeded(3);
        let n = 100_000;
        let x = Tensor::from_vec(crate::rng::normal_vec(&mut rng, n), n, &Device::Cpu).unwrap();
        let eps = rng.normal(&[n], &Device::Cpu).unwrap();
        let diff = v(&(corrupt(&x, NoiseLevel(1.5), &eps).unwrap() - &x).unwrap());
        let mean = diff.iter().sum::<f64>() / n as f64;
        let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((1.485..=1.515).contains(&sd), "sd {sd}");
    }

    #[test]
    fn train_sigma_degenerate_and_median() {
        let mut rng = seeded(11);
        let w = LossWeighting { p_std: 0.0, ..Default::default() };
        for _ in 0..100 {
            assert_eq!(sample_train_sigma(&w, &mut rng).0, (-1.2f64).exp());
        }
        let w = LossWeighting::default();
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_train_sigma(&w, &mut rng).0).collect();
        draws.sort_by(f64::total_cmp);
        let median = draws[draws.len() / 2];
        assert!((median / (-1.2f64).exp() - 1.0).abs() < 0.03, "median {median}");
    }

    #[test]
    fn train_sigma_always_positive() {
        let mut rng = seeded(12);
        let w = LossWeighting::default();
        assert!((0..1_000_000).all(|_| sample_train_sigma(&w, &mut rng).0 > 0.0));
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        let x = t(&[0.5, -1.0, 2.0, 0.1], &[2, 2]);
        let x_clean = x.clone();
        let oracle = FnDenoiser(move |_: &Tensor, _: &Tensor, _: &Conditioning| Ok(x_clean.clone()));
        let loss = denoising_loss(&oracle, &x, &Conditioning::none(), &LossWeighting::default(), &mut seeded(0)).unwrap();
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn identity_denoiser_loss_matches_lambda_sigma2_dim() {
        let (n, dim, sigma) = (10_000, 3, 0.7);
        let mut rng = seeded(5);
        let x = rng.normal(&[n, dim], &Device::Cpu).unwrap();
        let eps = rng.normal(&[n, dim], &Device::Cpu).unwrap();
        let ident = FnDenoiser(|xs: &Tensor, _: &Tensor, _: &Conditioning| Ok(xs.clone()));
        let w = LossWeighting::default();
        let per = weighted_errors(&ident, &x, &Conditioning::none(), &vec![sigma; n], &eps, &w).unwrap();
        let est = per.mean_all().unwrap().to_scalar::<f64>().unwrap();
        let expected = w.lambda(sigma) * sigma * sigma * dim as f64;
        assert!((est / expected - 1.0).abs() < 0.02, "{est} vs {expected}");
    }

    #[test]
    fn non_finite_output_reports_sigma() {
        let bad = FnDenoiser(|xs: &Tensor, _: &Tensor, _: &Conditioning| Ok((xs * f64::NAN)?));
        let x = t(&[1.0, 2.0], &[1, 2]);
        let eps = t(&[0.0, 0.0], &[1, 2]);
        let err = weighted_errors(&bad, &x, &Conditioning::none(), &[0.25], &eps, &LossWeighting::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteAtSigma { sigma, .. } if sigma == 0.25));
    }

    #[test]
    fn optimal_gaussian_denoiser_beats_perturbations() {
        let (n, dim) = (4096, 2);
        let mut rng = seeded(9);
        let x = rng.normal(&[n, dim], &Device::Cpu).unwrap();
        let w = LossWeighting { sigma_data: 1.0, ..Default::default() };
        let sigmas: Vec<f64> = (0..n).map(|_| sample_train_sigma(&w, &mut rng).0).collect();
        let eps = rng.normal(&[n, dim], &Device::Cpu).unwrap();
        let loss_of = |m: &dyn Denoiser| {
            weighted_errors(m, &x, &Conditioning::none(), &sigmas, &eps, &w).unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let best = loss_of(&GaussianOptimalDenoiser { data_var: 1.0 });
        for k in 0..20 {
            let scale = 1.0 + if k % 2 == 0 { 1.0 } else { -1.0 } * (0.1 + 0.05 * k as f64);
            let perturbed = FnDenoiser(move |xs: &Tensor, s: &Tensor, c: &Conditioning| {
                Ok((GaussianOptimalDenoiser { data_var: 1.0 }.denoise(xs, s, c)? * scale)?)
            });
            assert!(best <= loss_of(&perturbed), "perturbation {k} beat the optimum");
        }
    }

    #[test]
    fn schedule_single_step() {
        let s = build_sigma_schedule(&ScheduleConfig { num_steps: 1, ..Default::default() }).unwrap();
        assert_eq!(s, vec![80.0, 0.0]);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = build_sigma_schedule(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.len(), 41);
        assert_eq!(s[0], 80.0);
        assert_eq!(s[39], 0.002);
        assert_eq!(s[40], 0.0);
        // Closed form evaluated independently.
        let r = 7.0f64;
        let expected = (80f64.powf(1.0 / r) + 20.0 / 39.0 * (0.002f64.powf(1.0 / r) - 80f64.powf(1.0 / r))).powf(r);
        assert!((s[20] - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn schedule_rejects_zero_steps() {
        assert!(build_sigma_schedule(&ScheduleConfig { num_steps: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn precondition_coefficients() {
        let p = Precond::at(0.002, 0.5);
        assert!(p.c_skip >= 0.99998, "{}", p.c_skip);
        for s in [1e-3, 0.1, 1.0, 80.0] {
            let p = Precond::at(s, 0.5);
            assert!((p.c_in * (s * s + 0.25f64).sqrt() - 1.0).abs() < 1e-15);
        }
    }

    struct ZeroNet;
    impl RawNet for ZeroNet {
        fn forward(&self, x_in: &Tensor, _: &Tensor, _: &Conditioning) -> Result<Tensor> {
            Ok(x_in.zeros_like()?)
        }
    }

    #[test]
    fn precondition_jacobian_is_c_skip_identity() {
        let model = precondition(ZeroNet, 0.5).unwrap();
        let sigma = 0.3;
        let sig = Tensor::new(&[sigma], &Device::Cpu).unwrap();
        let base = [0.4, -1.1, 2.3];
        let h = 1e-6;
        let c_skip = Precond::at(sigma, 0.5).c_skip;
        for j in 0..3 {
            let mut plus = base;
            let mut minus = base;
            plus[j] += h;
            minus[j] -= h;
            let f = |p: [f64; 3]| v(&model.denoise(&t(&p, &[1, 3]), &sig, &Conditioning::none()).unwrap());
            let (fp, fm) = (f(plus), f(minus));
            for i in 0..3 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let want = if i == j { c_skip } else { 0.0 };
                assert!((fd - want).abs() <= 1e-6 * c_skip, "J[{i},{j}] = {fd}, want {want}");
            }
        }
    }

    #[test]
    fn precondition_rejects_nonpositive_sigma_data() {
        assert!(precondition(ZeroNet, 0.0).is_err());
    }

    #[test]
    fn zero_denoiser_collapses_to_exact_zero() {
        let zero = FnDenoiser(|xs: &Tensor, _: &Tensor, _: &Conditioning| Ok(xs.zeros_like()?));
        let out = sample(
            &zero,
            &Conditioning::none(),
            &[64, 3],
            &SamplerConfig::deterministic(40),
            &ScheduleConfig::default(),
            &mut seeded(1),
        )
        .unwrap();
        assert!(v(&out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_sampler_is_bitwise_reproducible() {
        let model = GaussianOptimalDenoiser { data_var: 1.0 };
        let run = |seed| {
            v(&sample(&model, &Conditioning::none(), &[16, 2], &SamplerConfig::default(), &ScheduleConfig::default(), &mut seeded(seed)).unwrap())
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn gaussian_sampler_moments_small() {
        let model = GaussianOptimalDenoiser { data_var: 1.0 };
        let out = sample(&model, &Conditioning::none(), &[10_000, 2], &SamplerConfig::default(), &ScheduleConfig::default(), &mut seeded(8)).unwrap();
        let vals = v(&out);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.04 && (var - 1.0).abs() < 0.08, "mean {mean} var {var}");
    }

    #[test]
    fn sampler_reports_non_finite_step() {
        let bad = FnDenoiser(|xs: &Tensor, _: &Tensor, _: &Conditioning| Ok((xs * f64::INFINITY)?));
        let err = sample(&bad, &Conditioning::none(), &[2, 2], &SamplerConfig::deterministic(5), &ScheduleConfig::default(), &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteAtStep { step: 0, .. }));
    }

    #[test]
    fn sigma_data_is_centered_rms() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 14.0]];
        // deviations: ±1, ±2 → mean square (1+1+4+4)/4 = 2.5
        assert!((estimate_sigma_data(&rows).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn schedule_strictly_decreasing_with_fixed_endpoints(n in 2usize..200, lo in 1e-4f64..0.1, hi in 1.0f64..200.0, rho in 1.0f64..10.0) {
                let cfg = ScheduleConfig { sigma_min: lo, sigma_max: hi, rho, num_steps: n };
                let s = build_sigma_schedule(&cfg).unwrap();
                prop_assert!(s.windows(2).all(|w| w[0] > w[1]));
                prop_assert_eq!(s[0], hi);
                prop_assert_eq!(s[n - 1], lo);
                prop_assert_eq!(s[n], 0.0);
            }

            #[test]
            fn corrupt_minus_data_is_scaled_noise(xs in proptest::collection::vec(-10.0f64..10.0, 6), es in proptest::collection::vec(-4.0f64..4.0, 6), sigma in 0.0f64..50.0) {
                let x = t(&xs, &[6]);
                let e = t(&es, &[6]);
                let got = v(&(corrupt(&x, NoiseLevel(sigma), &e).unwrap() - &x).unwrap());
                for (g, e) in got.iter().zip(&es) {
                    prop_assert!((g - sigma * e).abs() <= 1e-12 * (1.0 + sigma * e.abs() + 10.0));
                }
            }
        }
    }
}

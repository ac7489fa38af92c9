//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! A criterion that cannot be evaluated (an error) makes the process exit
//! nonzero; a measured FAIL is reported but does not. Pass criterion numbers as
//! arguments to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use vcdm::aux_model::{AuxModel, AuxModelConfig, Standardizer};
use vcdm::checkpoint::Checkpoint;
use vcdm::diffusion::{
    denoising_loss, sample, CondInput, Conditioning, FnDenoiser, GaussianOptimalDenoiser, LossWeighting,
    SamplerConfig, ScheduleConfig,
};
use vcdm::embedding::{kmeans_fit, pca_fit, Embedding, SourceTag};
use vcdm::evaluation::{frechet_distance, GaussianStats};
use vcdm::experiment::{
    cmd_sample, cmd_sweep_dim, cmd_train, compare_methods, ExperimentConfig, SampleOptions, Session, SweepArm,
    TrainOptions, TrainTarget, Which,
};
use vcdm::image_model::{attach_zero_init_conditioning, ImageExample, ImageModel, ImageModelConfig, ImageTrainer, Regime};
use vcdm::nn::ParamStore;
use vcdm::pipeline::Method;
use vcdm::rng::{normal_vec, seeded, Rng};
use vcdm::train::TrainConfig;

type Outcome = vcdm::Result<(bool, String)>;

fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianStats {
    GaussianStats { mean: DVector::from_vec(mean), cov, count: 2 }
}

fn random_psd(k: usize, rng: &mut Rng) -> DMatrix<f64> {
    let a = DMatrix::from_vec(k, k, normal_vec(rng, k * k));
    &a * a.transpose()
}

/// Univariate Fréchet distance `(μ1 − μ2)² + (s1 − s2)²`.
fn frechet_1d(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    (m1 - m2).powi(2) + (v1.sqrt() - v2.sqrt()).powi(2)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1);
    let mut worst_identical: f64 = 0.0;
    for k in [1, 3, 8, 32] {
        let g = stats(normal_vec(&mut rng, k), random_psd(k, &mut rng));
        worst_identical = worst_identical.max(frechet_distance(&g, &g)?);
    }
    let one = |m: f64, v: f64| stats(vec![m], DMatrix::from_element(1, 1, v));
    let shift = frechet_distance(&one(0.0, 1.0), &one(1.0, 1.0))?;
    let scale = frechet_distance(&one(0.0, 1.0), &one(0.0, 4.0))?;
    let mut closed_form_err = (shift - frechet_1d(0.0, 1.0, 1.0, 1.0)).abs().max((scale - frechet_1d(0.0, 1.0, 0.0, 4.0)).abs());
    closed_form_err = closed_form_err.max((shift - 1.0).abs()).max((scale - 1.0).abs());
    // Diagonal covariances reduce to a sum of univariate distances.
    for _ in 0..20 {
        let k = rng.random_range(1..10);
        let (m1, m2) = (normal_vec(&mut rng, k), normal_vec(&mut rng, k));
        let v1: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..4.0)).collect();
        let v2: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..4.0)).collect();
        let fd = frechet_distance(
            &stats(m1.clone(), DMatrix::from_diagonal(&DVector::from_vec(v1.clone()))),
            &stats(m2.clone(), DMatrix::from_diagonal(&DVector::from_vec(v2.clone()))),
        )?;
        let oracle: f64 = (0..k).map(|i| frechet_1d(m1[i], v1[i], m2[i], v2[i])).sum();
        closed_form_err = closed_form_err.max((fd - oracle).abs());
    }
    let mut asym: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..17);
        let a = stats(normal_vec(&mut rng, k), random_psd(k, &mut rng));
        let b = stats(normal_vec(&mut rng, k), random_psd(k, &mut rng));
        asym = asym.max((frechet_distance(&a, &b)? - frechet_distance(&b, &a)?).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_identical <= 1e-10 && closed_form_err <= 1e-8 && asym <= 1e-8 && secs < 10.0;
    Ok((
        pass,
        format!("identical {worst_identical:.2e}, closed-form err {closed_form_err:.2e}, asymmetry {asym:.2e}, {secs:.2}s"),
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let n = 50_000;
    let dims = 2;
    let schedule = ScheduleConfig::default();
    let model = GaussianOptimalDenoiser { data_var: 1.0 };
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, sampler, seed) in [
        ("churn 0", SamplerConfig { s_churn: 0.0, ..SamplerConfig::deterministic(40) }, 2),
        ("churn 50", SamplerConfig::default(), 3),
    ] {
        let x = sample(&model, &Conditioning::none(), &[n, dims], &sampler, &schedule, &mut seeded(seed))?;
        let rows: Vec<Vec<f64>> = x.to_vec2()?;
        for j in 0..dims {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            pass &= mean.abs() <= 0.02 && (0.95..=1.05).contains(&var);
            lines.push(format!("{name} coord {j}: mean {mean:+.4} var {var:.4}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    Ok((pass, format!("{}, {secs:.1}s", lines.join("; "))))
}

fn criterion_3() -> Outcome {
    let zero = FnDenoiser(|x: &Tensor, _s: &Tensor, _c: &Conditioning| Ok(x.zeros_like()?));
    let sampler = SamplerConfig { s_churn: 0.0, ..SamplerConfig::default() };
    let mut worst: f64 = 0.0;
    for (seed, shape) in [(4, vec![64, 2]), (5, vec![8, 3, 4, 4])] {
        let x = sample(&zero, &Conditioning::none(), &shape, &sampler, &ScheduleConfig::default(), &mut seeded(seed))?;
        let v: Vec<f64> = x.flatten_all()?.to_vec1()?;
        worst = v.iter().fold(worst, |m, a| m.max(a.abs()));
    }
    Ok((worst == 0.0, format!("max |x| = {worst:e}")))
}

fn ring_examples(n: usize, seed: u64) -> Vec<ImageExample> {
    let ring = vcdm::data::toy::RingConfig { count: n, ..Default::default() };
    let d = ring.generate(&mut seeded(seed));
    d.points.iter().map(|p| ImageExample { x: p.to_vec(), y: None, cond: CondInput::Null, aug: vec![] }).collect()
}

fn small_toy(regime: Regime, y_dim: usize) -> ImageModelConfig {
    ImageModelConfig { base_width: 32, embed_width: 16, mlp_depth: 2, ..ImageModelConfig::toy_2d(regime, y_dim) }
}

fn bits(t: &Tensor) -> vcdm::Result<Vec<u64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?.into_iter().map(f64::to_bits).collect())
}

fn criterion_4() -> Outcome {
    let train = TrainConfig { steps: 100, batch_size: 64, lr: 2e-3, ema_decay: 0.99 };
    let mut t = ImageTrainer::new(&ring_examples(512, 6), small_toy(Regime::Unconditional, 0), train, None, 7)?;
    t.run()?;
    let base = t.sampling_model()?;
    let y_dim = 8;
    let attached = attach_zero_init_conditioning(&base, y_dim)?;
    let mut rng = seeded(8);
    let b = 256;
    let mut differing = 0;
    for scale in [0.0, 1.0, 1e3] {
        let x = Tensor::from_vec(normal_vec(&mut rng, b * 2), (b, 2), &Device::Cpu)?;
        let sig: Vec<f64> = (0..b).map(|_| (-1.2 + 1.2 * normal_vec(&mut rng, 1)[0]).exp()).collect();
        let sig = Tensor::from_vec(sig, b, &Device::Cpu)?;
        let y = (Tensor::from_vec(normal_vec(&mut rng, b * y_dim), (b, y_dim), &Device::Cpu)? * scale)?;
        let nulls = vec![CondInput::Null; b];
        let a = bits(&base.image_denoise(&x, &sig, None, &nulls)?)?;
        let c = bits(&attached.image_denoise(&x, &sig, Some(&y), &nulls)?)?;
        differing += a.iter().zip(&c).filter(|(p, q)| p != q).count();
    }

    // The same property through the finetune path of the training command.
    let dir = tempfile::tempdir()?;
    let base_path = dir.path().join("base.ckpt");
    t.checkpoint()?.save(&base_path)?;
    let cfg = ExperimentConfig {
        output_dir: dir.path().join("run"),
        ring_count: 512,
        image_base_width: 32,
        image_embed_width: 16,
        image_mlp_depth: 2,
        image_steps: 0,
        finetune_base: Some(base_path),
        method: Method::Vcdm,
        ..Default::default()
    };
    let session = Session::new(cfg)?;
    let out = cmd_train(&session, TrainTarget::Image, &TrainOptions::default())?;
    let tuned = ImageModel::load(&out.retained[0])?;
    let x = Tensor::from_vec(normal_vec(&mut rng, b * 2), (b, 2), &Device::Cpu)?;
    let sig = Tensor::full(0.7, b, &Device::Cpu)?;
    let y = Tensor::from_vec(normal_vec(&mut rng, b * tuned.cfg.y_dim), (b, tuned.cfg.y_dim), &Device::Cpu)?;
    let nulls = vec![CondInput::Null; b];
    let a = bits(&base.image_denoise(&x, &sig, None, &nulls)?)?;
    let c = bits(&tuned.image_denoise(&x, &sig, Some(&y), &nulls)?)?;
    let differing_cmd = a.iter().zip(&c).filter(|(p, q)| p != q).count();
    Ok((
        differing == 0 && differing_cmd == 0,
        format!("{differing} differing outputs after attaching, {differing_cmd} after the finetune command"),
    ))
}

/// Replace every parameter with fresh Gaussian values so that zero-initialized
/// layers do not mask gradients.
fn randomize(params: &ParamStore, rng: &mut Rng) -> vcdm::Result<()> {
    for (_, v) in params.iter() {
        let n = v.elem_count();
        v.set(&(Tensor::from_vec(normal_vec(rng, n), v.shape(), &Device::Cpu)? * 0.3)?)?;
    }
    Ok(())
}

fn set_entry(v: &Var, i: usize, value: f64) -> vcdm::Result<()> {
    let mut data: Vec<f64> = v.flatten_all()?.to_vec1()?;
    data[i] = value;
    v.set(&Tensor::from_vec(data, v.shape(), &Device::Cpu)?)?;
    Ok(())
}

fn entry(v: &Var, i: usize) -> vcdm::Result<f64> {
    Ok(v.flatten_all()?.to_vec1::<f64>()?[i])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare backprop against central differences of `Σ w ⊙ f(x)` at 10 random
/// points, each checking one input entry and one parameter entry.
fn grad_check(
    params: &ParamStore,
    x_shape: (usize, usize),
    f: &dyn Fn(&Tensor, &Tensor) -> vcdm::Result<Tensor>,
    seed: u64,
) -> vcdm::Result<f64> {
    let mut rng = seeded(seed);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let (b, d) = x_shape;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = Var::from_tensor(&Tensor::from_vec(normal_vec(&mut rng, b * d), (b, d), &Device::Cpu)?)?;
        let sig: Vec<f64> = (0..b).map(|_| (-1.2 + 1.2 * normal_vec(&mut rng, 1)[0]).exp()).collect();
        let sig = Tensor::from_vec(sig, b, &Device::Cpu)?;
        let w = Tensor::from_vec(normal_vec(&mut rng, b * d), (b, d), &Device::Cpu)?;
        let loss = |x: &Tensor| -> vcdm::Result<Tensor> { Ok((f(x, &sig)? * &w)?.sum_all()?) };
        let grads = loss(x.as_tensor())?.backward()?;

        let xi = rng.random_range(0..b * d);
        let gx: f64 = grads.get(x.as_tensor()).expect("input gradient").flatten_all()?.to_vec1::<f64>()?[xi];
        let x0 = entry(&x, xi)?;
        set_entry(&x, xi, x0 + h)?;
        let up = loss(x.as_tensor())?.to_scalar::<f64>()?;
        set_entry(&x, xi, x0 - h)?;
        let down = loss(x.as_tensor())?.to_scalar::<f64>()?;
        set_entry(&x, xi, x0)?;
        worst = worst.max(rel_err(gx, (up - down) / (2.0 * h)));

        let name = &names[rng.random_range(0..names.len())];
        let v = params.get(name).expect("parameter");
        let pi = rng.random_range(0..v.elem_count());
        let gp = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[pi],
            None => 0.0,
        };
        let p0 = entry(v, pi)?;
        set_entry(v, pi, p0 + h)?;
        let up = loss(x.as_tensor())?.to_scalar::<f64>()?;
        set_entry(v, pi, p0 - h)?;
        let down = loss(x.as_tensor())?.to_scalar::<f64>()?;
        set_entry(v, pi, p0)?;
        worst = worst.max(rel_err(gp, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

fn criterion_5() -> Outcome {
    let mut rng = seeded(9);
    let acfg = AuxModelConfig { embed_dim: 4, token_dim: 8, num_layers: 2, num_heads: 2, class_count: Some(3), aug_label_dim: 0 };
    let aux = AuxModel::new(acfg, Standardizer::identity(4), 0.5, &mut rng)?;
    randomize(&aux.params, &mut rng)?;
    let classes: Vec<CondInput> = (0..6).map(|i| CondInput::Class(i % 3)).collect();
    let aux_err = grad_check(&aux.params, (6, 4), &|x, s| aux.aux_denoise(x, s, &classes, None), 10)?;

    let img = ImageModel::new(small_toy(Regime::Embedding, 3), 0.5, &mut rng)?;
    randomize(&img.params, &mut rng)?;
    let y = Tensor::from_vec(normal_vec(&mut rng, 6 * 3), (6, 3), &Device::Cpu)?;
    let nulls = vec![CondInput::Null; 6];
    let img_err = grad_check(&img.params, (6, 2), &|x, s| img.image_denoise(x, s, Some(&y), &nulls), 11)?;
    Ok((aux_err < 1e-3 && img_err < 1e-3, format!("max rel err aux {aux_err:.2e}, image {img_err:.2e}")))
}

/// Expected weighted error of the linear denoiser `c(σ)·x_σ` at one data point,
/// in closed form over the noise: `λ(σ)·((1 − c)²‖x‖² + c²σ²d)`.
fn inner_expectation(x: &[f64], sigma: f64, data_var: f64, w: &LossWeighting) -> f64 {
    let c = data_var / (data_var + sigma * sigma);
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    w.lambda(sigma) * ((1.0 - c).powi(2) * norm2 + c * c * sigma * sigma * x.len() as f64)
}

fn criterion_6() -> Outcome {
    let d = 64;
    let data_var = 2.0;
    let weighting = LossWeighting::default();
    let mut rng = seeded(12);
    let points: Vec<Vec<f64>> = (0..4).map(|i| normal_vec(&mut rng, d).iter().map(|v| v * (0.5 + 0.5 * i as f64)).collect()).collect();
    let x = Tensor::from_vec(points.concat(), (4, d), &Device::Cpu)?;
    let model = GaussianOptimalDenoiser { data_var };
    let seeds = 1000;
    let mut est = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        est.push(denoising_loss(&model, &x, &Conditioning::none(), &weighting, &mut seeded(1_000_000 + s))?.to_scalar::<f64>()?);
    }
    let mean = est.iter().sum::<f64>() / seeds as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt();

    // Trapezoid rule over z with ln σ = P_mean + P_std·z, nested inside the
    // average over the four points.
    let (lo, hi, nodes) = (-10.0, 10.0, 20_001);
    let dz = (hi - lo) / (nodes - 1) as f64;
    let mut brute = 0.0;
    for p in &points {
        let mut integral = 0.0;
        for k in 0..nodes {
            let z: f64 = lo + k as f64 * dz;
            let sigma = (weighting.p_mean + weighting.p_std * z).exp();
            let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let wt = if k == 0 || k == nodes - 1 { 0.5 } else { 1.0 };
            integral += wt * density * inner_expectation(p, sigma, data_var, &weighting);
        }
        brute += integral * dz / points.len() as f64;
    }
    let rel = (mean - brute).abs() / brute;
    let se = sd / (seeds as f64).sqrt() / brute;
    Ok((rel <= 0.01, format!("MC {mean:.5} vs nested {brute:.5}: rel diff {:.3}% (MC std err {:.3}%)", 100.0 * rel, 100.0 * se)))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let methods = [Method::Vcdm, Method::EdmDirect, Method::ClassCond, Method::VcdmOracle];
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in 0..5 {
        let base = ExperimentConfig::default();
        let cfg = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            seed,
            checkpoint_every: base.image_steps.max(base.aux_steps),
            ..base
        };
        for row in compare_methods(&Session::new(cfg)?, &methods)? {
            scores.entry(row.method.clone()).or_default().push(row.score);
        }
    }
    let med = |m: Method| median(scores[m.flag()].clone());
    let (vcdm, edm, class, oracle) = (med(Method::Vcdm), med(Method::EdmDirect), med(Method::ClassCond), med(Method::VcdmOracle));
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass = vcdm <= edm && oracle <= 1.1 * vcdm && vcdm <= 1.1 * class && minutes < 30.0;
    Ok((
        pass,
        format!("median Fréchet vcdm {vcdm:.5}, edm {edm:.5}, class-cond {class:.5}, oracle {oracle:.5}; {minutes:.1} min"),
    ))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        sweep_arms: vec![SweepArm::Pca],
        sweep_dims: vec![1, 2, 4, 8],
        sweep_budgets: vec![200, 1500],
        sweep_seeds: (0..5).collect(),
        ..Default::default()
    };
    let rows = cmd_sweep_dim(&Session::new(cfg.clone())?)?;
    let mut medians: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &budget in &cfg.sweep_budgets {
        for &d in &cfg.sweep_dims {
            let s: Vec<f64> = rows.iter().filter(|r| r.budget == budget && r.dim_or_k == d).map(|r| r.score).collect();
            medians.insert((budget, d), median(s));
        }
    }
    let argmin = |budget: usize| {
        cfg.sweep_dims.iter().copied().min_by(|a, b| medians[&(budget, *a)].total_cmp(&medians[&(budget, *b)])).unwrap_or(0)
    };
    let (small, large) = (argmin(200), argmin(1500));
    let table: Vec<String> = medians.iter().map(|((b, d), s)| format!("b{b}/d{d} {s:.4}")).collect();
    Ok((
        rows.len() == 40 && small <= large,
        format!(
            "optimum dim {small} at budget 200, {large} at budget 1500 [{}]; {:.1} min",
            table.join(", "),
            start.elapsed().as_secs_f64() / 60.0
        ),
    ))
}

/// Indicator vector of the best 2-partition by within-cluster sum of squares.
fn brute_force_partition(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    let sse = |members: &[&Vec<f64>]| -> f64 {
        let d = members[0].len();
        let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
        members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum()
    };
    let mut best = (f64::INFINITY, 0u32);
    // Point 0 is fixed in cluster 0 to skip label swaps.
    for mask in 1..(1u32 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| if i > 0 && mask & (1 << (i - 1)) != 0 { 1 } else { 0 }).collect();
        let c0: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(p, _)| p).collect();
        let c1: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == 1).map(|(p, _)| p).collect();
        let total = sse(&c0) + sse(&c1);
        if total < best.0 {
            best = (total, mask);
        }
    }
    (0..n).map(|i| if i > 0 && best.1 & (1 << (i - 1)) != 0 { 1 } else { 0 }).collect()
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.iter().zip(b).all(|(x, y)| x == y) || a.iter().zip(b).all(|(x, y)| *x != *y)
}

fn criterion_9() -> Outcome {
    let mut rng = seeded(13);
    let (n, d) = (200, 6);
    let scales = [3.0, 2.0, 1.5, 1.0, 0.5, 0.25];
    let rows: Vec<Vec<f64>> =
        (0..n).map(|_| normal_vec(&mut rng, d).iter().zip(&scales).map(|(v, s)| v * s + 1.0).collect()).collect();
    let emb: Vec<Embedding> = rows.iter().map(|r| Embedding { values: r.clone(), source: SourceTag::Proxy }).collect();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let mut sv: Vec<f64> = centered.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let mut pca_err: f64 = 0.0;
    for k in 1..=d {
        let oracle: f64 = sv[k..].iter().map(|s| s * s).sum::<f64>() / n as f64;
        let got = pca_fit(&emb, k)?.reconstruction_error(&emb)?;
        pca_err = pca_err.max((got - oracle).abs());
    }

    let mut truth = Vec::new();
    let mut blob = Vec::new();
    for i in 0..12 {
        let c = if i % 3 == 0 { 1 } else { 0 };
        let center = if c == 1 { [6.0, -4.0] } else { [-5.0, 3.0] };
        let p: Vec<f64> = normal_vec(&mut rng, 2).iter().zip(center).map(|(v, m)| m + 0.5 * v).collect();
        truth.push(c);
        blob.push(p);
    }
    let blob_emb: Vec<Embedding> = blob.iter().map(|r| Embedding { values: r.clone(), source: SourceTag::Proxy }).collect();
    let cb = kmeans_fit(&blob_emb, 2, &mut seeded(14))?;
    let labels = blob_emb.iter().map(|e| cb.assign(e)).collect::<vcdm::Result<Vec<_>>>()?;
    let brute = brute_force_partition(&blob);
    let kmeans_ok = same_partition(&labels, &brute) && same_partition(&brute, &truth);
    Ok((pca_err <= 1e-8 && kmeans_ok, format!("PCA max abs err {pca_err:.2e}; K-means partition matches enumeration: {kmeans_ok}")))
}

fn tiny_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        seed: 21,
        ring_count: 512,
        ring_holdout: 64,
        ring_reference: 500,
        aux_token_dim: 16,
        aux_steps: 40,
        aux_batch: 32,
        image_base_width: 32,
        image_embed_width: 16,
        image_mlp_depth: 2,
        image_steps: 40,
        image_batch: 32,
        checkpoint_every: 10,
        heldout_n: 32,
        embed_sample_steps: 8,
        image_sample_steps: 8,
        sample_count: 16,
        ..Default::default()
    }
}

/// Loss curve without the wall-clock column.
fn curve(path: &Path) -> vcdm::Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(|l| l.rsplit_once(',').map_or(l, |p| p.0).to_string()).collect())
}

struct RunRecord {
    curves: Vec<Vec<String>>,
    ema: Vec<BTreeMap<String, Vec<u64>>>,
    samples: Vec<u8>,
}

fn ema_bits(path: &Path) -> vcdm::Result<BTreeMap<String, Vec<u64>>> {
    Checkpoint::load(path)?.group("ema").iter().map(|(k, t)| Ok((k.clone(), bits(t)?))).collect()
}

/// Train both models of the configured method, optionally interrupting each
/// run after `stop_after` steps and resuming it, then sample.
fn record_run(cfg: &ExperimentConfig, stop_after: Option<usize>) -> vcdm::Result<RunRecord> {
    if cfg.output_dir.exists() {
        std::fs::remove_dir_all(&cfg.output_dir)?;
    }
    let session = Session::new(cfg.clone())?;
    let mut curves = Vec::new();
    let mut ema = Vec::new();
    for target in [TrainTarget::Aux, TrainTarget::Image] {
        if let Some(s) = stop_after {
            let partial = cmd_train(&session, target, &TrainOptions { stop_after: Some(s), resume_from: None })?;
            assert_eq!(partial.step, s);
        }
        let out = cmd_train(&session, target, &TrainOptions::default())?;
        curves.push(curve(&out.loss_csv)?);
        ema.push(ema_bits(out.retained.last().expect("checkpoint"))?);
    }
    let which = Which::Image(ExperimentConfig::regime_for(cfg.method));
    assert!(session.paths.index(which).exists());
    let out = cmd_sample(&session, &SampleOptions { method: cfg.method, count: cfg.sample_count, class: None })?;
    Ok(RunRecord { curves, ema, samples: std::fs::read(out.samples)? })
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir()?;
    let cfg = tiny_config(&dir.path().join("run"));
    let first = record_run(&cfg, None)?;
    let second = record_run(&cfg, None)?;
    let resumed = record_run(&cfg, Some(20))?;
    let same = |a: &RunRecord, b: &RunRecord| a.curves == b.curves && a.ema == b.ema && a.samples == b.samples;
    let repeat = same(&first, &second);
    let resume = same(&first, &resumed);
    let lengths = first.curves.iter().map(Vec::len).collect::<Vec<_>>();
    Ok((
        repeat && resume && lengths == vec![41, 41] && !first.samples.is_empty(),
        format!("repeat run bitwise equal: {repeat}; interrupted at step 20 and resumed equals uninterrupted: {resume}"),
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "Fréchet distance unit suite", criterion_1),
        (2, "sampler calibration oracle", criterion_2),
        (3, "zero denoiser integrates to zero", criterion_3),
        (4, "zero-init finetuning equivalence", criterion_4),
        (5, "gradient checks", criterion_5),
        (6, "loss oracle equivalence", criterion_6),
        (7, "toy end-to-end direction of effect", criterion_7),
        (8, "dimension sweep shape", criterion_8),
        (9, "PCA and K-means oracles", criterion_9),
        (10, "determinism and resume", criterion_10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut passed, mut failed, mut errored) = (0, 0, 0);
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match run() {
            Ok((true, d)) => {
                passed += 1;
                ("PASS", d)
            }
            Ok((false, d)) => {
                failed += 1;
                ("FAIL", d)
            }
            Err(e) => {
                errored += 1;
                ("FAIL", format!("error: {e}"))
            }
        };
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64());
        println!("criterion {n:>2} {status}: {name}: {detail} [{took:.1?}]");
    }
    println!("acceptance: {passed} passed, {failed} failed, {errored} errored");
    if errored > 0 {
        std::process::exit(1);
    }
}

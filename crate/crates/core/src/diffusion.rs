//! Noise schedule, forward process and the DDIM sampler.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{decode_layout, encode_layout, Layout, LayoutMatrix};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β schedule over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("diffusion step count must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t for `t` in `0..=T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Per-sample coefficient column `(B, 1, 1)`.
    fn coefficient(
        &self,
        t: &[usize],
        f: impl Fn(f64) -> f64,
        device: &Device,
        dtype: DType,
    ) -> Result<Tensor> {
        let v: Vec<f64> = t.iter().map(|&t| f(self.alpha_bar(t))).collect();
        Ok(Tensor::from_vec(v, (t.len(), 1, 1), device)?.to_dtype(dtype)?)
    }
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_timestep(t)?;
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn estimate_x0(x_t: &[f64], eps_pred: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_timestep(t)?;
    if x_t.len() != eps_pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "x_t has {} values, eps_pred {}",
            x_t.len(),
            eps_pred.len()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| (x - b * e) / a).collect())
}

fn check_batch(t: &[usize], x: &Tensor, sched: &NoiseSchedule) -> Result<()> {
    for &s in t {
        sched.check_timestep(s)?;
    }
    if x.dims().first() != Some(&t.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} timesteps for a batch of shape {:?}",
            t.len(),
            x.dims()
        )));
    }
    Ok(())
}

/// Batched forward process on `(B, N, D)` tensors with one timestep per sample.
pub fn q_sample_batch(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_batch(t, x0, sched)?;
    let (dev, dt) = (x0.device(), x0.dtype());
    let a = sched.coefficient(t, f64::sqrt, dev, dt)?;
    let b = sched.coefficient(t, |ab| (1.0 - ab).sqrt(), dev, dt)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// Batched x0 estimate; differentiable in both arguments.
pub fn estimate_x0_batch(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_batch(t, x_t, sched)?;
    let (dev, dt) = (x_t.device(), x_t.dtype());
    let inv_a = sched.coefficient(t, |ab| 1.0 / ab.sqrt(), dev, dt)?;
    let b = sched.coefficient(t, |ab| (1.0 - ab).sqrt(), dev, dt)?;
    Ok((x_t - eps_pred.broadcast_mul(&b)?)?.broadcast_mul(&inv_a)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    pub refine_start_fraction: f64,
    /// Clamp the intermediate x0 estimate to the data range `[-1, 1]`.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ddim_steps: 100, eta: 0.0, refine_start_fraction: 0.1, clip_x0: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > sched.steps() {
            return Err(Error::InvalidConfig(format!(
                "ddim_steps must be in 1..={}, got {}",
                sched.steps(),
                self.ddim_steps
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if !(self.refine_start_fraction > 0.0 && self.refine_start_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "refine_start_fraction must be in (0, 1], got {}",
                self.refine_start_fraction
            )));
        }
        Ok(())
    }

    /// Uniform-stride subsequence in ascending order.
    pub fn timesteps(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        self.validate(sched)?;
        let (s, t) = (self.ddim_steps, sched.steps());
        Ok((1..=s).map(|k| ((k * t) as f64 / s as f64).round() as usize).collect())
    }

    pub fn refine_start(&self, sched: &NoiseSchedule) -> Result<usize> {
        self.validate(sched)?;
        Ok(((self.refine_start_fraction * sched.steps() as f64).round() as usize).max(1))
    }
}

/// Anything that predicts ε from a noisy batch `(B, N, D)`.
pub trait NoisePredictor {
    type Cond;

    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &Self::Cond) -> Result<Tensor>;
}

/// Standard-normal starting point for `batch` layouts.
pub fn initial_noise<R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize, usize),
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

fn check_finite(x: &Tensor, location: impl FnOnce() -> String) -> Result<()> {
    let sum = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if sum.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure { location: location() })
    }
}

/// Runs the DDIM update from `x` (at timestep `path[0]`) down through `path`
/// and then to t = 0, returning the final x0 estimate.
fn ddim_loop<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    mut x: Tensor,
    path: &[usize],
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let b = x.dim(0)?;
    for (i, &t) in path.iter().enumerate() {
        let t_prev = path.get(i + 1).copied().unwrap_or(0);
        let ts = vec![t; b];
        let eps = model.predict_noise(&x, &ts, cond)?;
        check_finite(&eps, || format!("sampler step t={t}"))?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        let mut x0 = ((&x - eps.affine((1.0 - ab).sqrt(), 0.0)?)? * (1.0 / ab.sqrt()))?;
        let mut eps = eps;
        if sampler.clip_x0 {
            x0 = x0.clamp(-1.0, 1.0)?;
            eps = ((&x - x0.affine(ab.sqrt(), 0.0)?)? * (1.0 / (1.0 - ab).sqrt()))?;
        }
        let sigma = sampler.eta
            * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
            * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = (x0.affine(ab_prev.sqrt(), 0.0)? + eps.affine(dir, 0.0)?)?;
        if sigma > 0.0 {
            let z = initial_noise(rng, x.dims3()?, x.device(), x.dtype())?;
            next = (next + z.affine(sigma, 0.0)?)?;
        }
        x = next;
    }
    Ok(x)
}

/// DDIM sampling from a given `x_T`; returns the final continuous layouts.
pub fn ddim_sample_from<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    x_t: Tensor,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut path = sampler.timesteps(sched)?;
    path.reverse();
    ddim_loop(model, cond, x_t, &path, sampler, sched, rng)
}

/// Samples `batch` layouts starting from noise drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    shape: (usize, usize, usize),
    num_categories: usize,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    device: &Device,
    dtype: DType,
    rng: &mut R,
) -> Result<Vec<Layout>> {
    let x_t = initial_noise(rng, shape, device, dtype)?;
    let x0 = ddim_sample_from(model, cond, x_t, sampler, sched, rng)?;
    decode_batch(&x0, num_categories)
}

/// Treats `x_start` as a sample at t* and runs the sampler tail below it.
pub fn refine_from<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    x_start: Tensor,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let t_star = sampler.refine_start(sched)?;
    let mut path: Vec<usize> =
        sampler.timesteps(sched)?.into_iter().filter(|&t| t < t_star).collect();
    path.push(t_star);
    path.reverse();
    ddim_loop(model, cond, x_start, &path, sampler, sched, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn refine<M: NoisePredictor, R: Rng + ?Sized>(
    noisy: &[Layout],
    model: &M,
    cond: &M::Cond,
    num_categories: usize,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    device: &Device,
    dtype: DType,
    rng: &mut R,
) -> Result<Vec<Layout>> {
    let x = encode_batch(noisy, num_categories, device, dtype)?;
    let x0 = refine_from(model, cond, x, sampler, sched, rng)?;
    decode_batch(&x0, num_categories)
}

/// Stacks encoded layouts into a `(B, N, C + 4)` tensor.
pub fn encode_batch(
    layouts: &[Layout],
    num_categories: usize,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let mut rows = 0;
    let mut data = Vec::new();
    for l in layouts {
        let m = encode_layout(l, num_categories)?;
        if rows != 0 && m.rows != rows {
            return Err(Error::ShapeMismatch("layouts in a batch must share capacity".into()));
        }
        rows = m.rows;
        data.extend_from_slice(&m.data);
    }
    let cols = num_categories + crate::layout::GEOMETRY_COLUMNS;
    Ok(Tensor::from_vec(data, (layouts.len(), rows, cols), device)?.to_dtype(dtype)?)
}

pub fn decode_batch(x: &Tensor, num_categories: usize) -> Result<Vec<Layout>> {
    let (b, n, d) = x.dims3()?;
    let flat = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    (0..b)
        .map(|i| {
            let m = LayoutMatrix::from_vec(n, d, flat[i * n * d..(i + 1) * n * d].to_vec())?;
            Ok(decode_layout(&m, num_categories, crate::layout::DEFAULT_VALIDITY_THRESHOLD))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(steps: usize, beta: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![beta; steps])
    }

    #[test]
    fn constant_beta_products() {
        let s = constant(2, 0.1);
        assert_relative_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar(2), 0.81, epsilon = 1e-15);
        let one = make_schedule(1, 0.1, 0.1).unwrap();
        assert_relative_eq!(one.alpha_bar(1), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        assert!(make_schedule(0, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_is_consistent() {
        let s = make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert_relative_eq!(s.beta(1), 1e-4);
        assert_relative_eq!(s.beta(1000), 2e-2);
        for t in 1..=s.steps() {
            let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
            assert!((ratio - s.alpha(t)).abs() <= 4.0 * f64::EPSILON, "t={t}");
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn forward_process_examples() {
        let s = constant(2, 0.1);
        let x = q_sample(&[1.0], 2, &[1.0], &s).unwrap();
        assert_relative_eq!(x[0], 0.9 + 0.19f64.sqrt(), epsilon = 1e-12);
        assert!((x[0] - 1.33589).abs() < 1e-5);
        let z = q_sample(&[0.5, -2.0], 1, &[0.0, 0.0], &s).unwrap();
        assert_relative_eq!(z[1], -2.0 * 0.9f64.sqrt());
        assert!(matches!(
            q_sample(&[1.0], 3, &[0.0], &s),
            Err(Error::TimestepOutOfRange { t: 3, max: 2 })
        ));
        assert!(q_sample(&[1.0], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn forward_variance_matches_schedule() {
        let s = make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in [10, 300, 900] {
            let eps: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
            let x = q_sample(&vec![0.3; eps.len()], t, &eps, &s).unwrap();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
            let expected = 1.0 - s.alpha_bar(t);
            assert!((var / expected - 1.0).abs() < 0.02, "t={t}: {var} vs {expected}");
        }
    }

    #[test]
    fn estimate_inverts_forward() {
        let s = make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let xt = q_sample(&x0, 500, &eps, &s).unwrap();
        let back = estimate_x0(&xt, &eps, 500, &s).unwrap();
        for (a, b) in x0.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        let no_eps = estimate_x0(&xt, &[0.0; 64], 500, &s).unwrap();
        assert_relative_eq!(no_eps[5], xt[5] / s.alpha_bar(500).sqrt());
    }

    #[test]
    fn batched_forms_agree_with_slices() {
        let s = make_schedule(100, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = initial_noise(&mut rng, (3, 2, 5), &Device::Cpu, DType::F64).unwrap();
        let eps = initial_noise(&mut rng, (3, 2, 5), &Device::Cpu, DType::F64).unwrap();
        let t = [1, 50, 100];
        let xt = q_sample_batch(&x0, &t, &eps, &s).unwrap();
        let back = estimate_x0_batch(&xt, &eps, &t, &s).unwrap();
        let [x0v, epsv, xtv, backv] =
            [&x0, &eps, &xt, &back].map(|x| x.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        for (b, &tb) in t.iter().enumerate() {
            let r = b * 10..(b + 1) * 10;
            let xs = q_sample(&x0v[r.clone()], tb, &epsv[r.clone()], &s).unwrap();
            for (i, v) in xs.iter().enumerate() {
                assert!((v - xtv[b * 10 + i]).abs() < 1e-12);
                assert!((x0v[b * 10 + i] - backv[b * 10 + i]).abs() < 1e-10);
            }
        }
        assert!(q_sample_batch(&x0, &[1, 2], &eps, &s).is_err());
    }

    /// Returns the exact ε that maps `x_t` back to a fixed target.
    struct Planted {
        target: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Planted {
        type Cond = ();

        fn predict_noise(&self, x_t: &Tensor, t: &[usize], _: &()) -> Result<Tensor> {
            let ab = self.sched.alpha_bar(t[0]);
            Ok(((x_t - self.target.affine(ab.sqrt(), 0.0)?)? * (1.0 / (1.0 - ab).sqrt()))?)
        }
    }

    fn planted_target() -> (Layout, Tensor) {
        use crate::layout::LayoutElement;
        let l = Layout::from_slots(vec![
            Some(LayoutElement::new(1, [0.5, 0.2, 0.6, 0.1])),
            Some(LayoutElement::new(0, [0.3, 0.7, 0.2, 0.3])),
            None,
            Some(LayoutElement::new(2, [0.5, 0.2, 0.7, 0.15])),
        ]);
        let x = encode_batch(std::slice::from_ref(&l), 3, &Device::Cpu, DType::F64).unwrap();
        (l, x)
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn planted_noise_is_recovered() {
        let sched = make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let (layout, target) = planted_target();
        let model = Planted { target: target.clone(), sched: sched.clone() };
        let mut outs = vec![];
        for steps in [20, 100, 1000] {
            let sampler = SamplerConfig { ddim_steps: steps, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x_t = initial_noise(&mut rng, (1, 4, 7), &Device::Cpu, DType::F64).unwrap();
            let x0 = ddim_sample_from(&model, &(), x_t, &sampler, &sched, &mut rng).unwrap();
            assert!(max_diff(&x0, &target) < 1e-6, "steps={steps}");
            outs.push(x0);
        }
        assert!(max_diff(&outs[0], &outs[2]) < 1e-6);
        let decoded = decode_batch(&outs[1], 3).unwrap();
        assert_eq!(decoded[0].valid_mask(), layout.valid_mask());
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = make_schedule(100, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let (_, target) = planted_target();
        let model = Planted { target: (target * 0.5).unwrap(), sched: sched.clone() };
        let sampler = SamplerConfig { ddim_steps: 10, ..Default::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            ddim_sample(&model, &(), (1, 4, 7), 3, &sampler, &sched, &Device::Cpu, DType::F64, &mut rng)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn refinement_returns_planted_layout() {
        let sched = make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let (layout, target) = planted_target();
        let model = Planted { target, sched: sched.clone() };
        let sampler = SamplerConfig { ddim_steps: 100, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = crate::layout::perturb_layout(&layout, 0.01, &mut rng).unwrap();
        let out = refine(
            &[noisy.clone()],
            &model,
            &(),
            3,
            &sampler,
            &sched,
            &Device::Cpu,
            DType::F64,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out[0].valid_mask(), layout.valid_mask());
        for (a, b) in out[0].iter_valid().zip(layout.iter_valid()) {
            assert_eq!(a.1.category, b.1.category);
            for k in 0..4 {
                assert!((a.1.bbox[k] - b.1.bbox[k]).abs() < 1e-6);
            }
        }
        // A perfect model for the unperturbed layout leaves it unchanged.
        let fixed = refine(
            &[layout.clone()],
            &model,
            &(),
            3,
            &sampler,
            &sched,
            &Device::Cpu,
            DType::F64,
            &mut rng,
        )
        .unwrap();
        for (a, b) in fixed[0].iter_valid().zip(layout.iter_valid()) {
            assert_eq!(a.1.category, b.1.category);
            assert!((a.1.bbox[2] - b.1.bbox[2]).abs() < 1e-9);
        }
        let bad = SamplerConfig { refine_start_fraction: 0.0, ..sampler };
        assert!(bad.refine_start(&sched).is_err());
    }

    #[test]
    fn stride_subsequence_is_increasing() {
        let s = make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        for steps in [1, 7, 20, 100, 999, 1000] {
            let ts = SamplerConfig { ddim_steps: steps, ..Default::default() }.timesteps(&s).unwrap();
            assert_eq!(ts.len(), steps);
            assert_eq!(*ts.last().unwrap(), 1000);
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(SamplerConfig { ddim_steps: 1001, ..Default::default() }.timesteps(&s).is_err());
    }

    struct Exploding;

    impl NoisePredictor for Exploding {
        type Cond = ();

        fn predict_noise(&self, x_t: &Tensor, _: &[usize], _: &()) -> Result<Tensor> {
            Ok((x_t * f64::NAN)?)
        }
    }

    #[test]
    fn non_finite_prediction_names_the_step() {
        let s = make_schedule(10, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let sampler = SamplerConfig { ddim_steps: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = ddim_sample(&Exploding, &(), (1, 2, 7), 3, &sampler, &s, &Device::Cpu, DType::F64, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { ref location } if location.contains("t=10")));
    }
}

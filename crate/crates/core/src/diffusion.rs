//! Noise schedule, forward noising, deterministic DDIM sampling with
//! classifier-free guidance, and the denoising objective.
//!
//! `alpha_bar(t)` is the cumulative signal coefficient: `z_t = sqrt(ab_t) z_0 +
//! sqrt(1 - ab_t) eps`. Index 0 is the clean sample (`ab_0 = 1`).

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear per-step variance ramp `beta_1 = beta_start .. beta_T = beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(0.0 <= beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "beta range must satisfy 0 <= start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(shape_err(format!(
            "{what}: {:?} vs {:?}",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

/// `sqrt(ab) z0 + sqrt(1 - ab) eps`, evaluated in double precision.
pub fn noise_latent(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape(z0, eps, "add_noise")?;
    let kind = z0.kind();
    let out = z0.to_kind(Kind::Double) * alpha_bar.sqrt()
        + eps.to_kind(Kind::Double) * (1.0 - alpha_bar).sqrt();
    Ok(out.to_kind(kind))
}

pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    noise_latent(z0, eps, schedule.alpha_bar(t))
}

/// Per-sample timesteps over the leading batch dimension. A single timestep
/// broadcasts over the batch.
pub fn add_noise_batch(
    z0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(z0, eps, "add_noise")?;
    if ts.len() == 1 {
        return add_noise(z0, eps, ts[0], schedule);
    }
    let batch = z0.size()[0];
    if ts.len() as i64 != batch {
        return Err(shape_err(format!("{} timesteps for batch {batch}", ts.len())));
    }
    for &t in ts {
        schedule.check_step(t)?;
    }
    let mut view = vec![batch];
    view.extend(std::iter::repeat(1).take(z0.dim() - 1));
    let signal: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect();
    let noise: Vec<f64> = ts
        .iter()
        .map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt())
        .collect();
    let signal = Tensor::from_slice(&signal).view(view.as_slice());
    let noise = Tensor::from_slice(&noise).view(view.as_slice());
    let kind = z0.kind();
    Ok((z0.to_kind(Kind::Double) * signal + eps.to_kind(Kind::Double) * noise).to_kind(kind))
}

/// One deterministic DDIM update from signal level `ab_t` to `ab_prev`.
pub fn ddim_update(z_t: &Tensor, eps_hat: &Tensor, ab_t: f64, ab_prev: f64) -> Result<Tensor> {
    same_shape(z_t, eps_hat, "ddim_step")?;
    let kind = z_t.kind();
    let scale = (ab_prev / ab_t).sqrt();
    let direction = ab_prev.sqrt() * ((1.0 / ab_prev - 1.0).sqrt() - (1.0 / ab_t - 1.0).sqrt());
    let out = z_t.to_kind(Kind::Double) * scale + eps_hat.to_kind(Kind::Double) * direction;
    Ok(out.to_kind(kind))
}

pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "DDIM step must move backwards, got t={t} -> t_prev={t_prev}"
        )));
    }
    same_shape(z_t, eps_hat, "ddim_step")?;
    if t_prev == t {
        return Ok(z_t.copy());
    }
    ddim_update(z_t, eps_hat, schedule.alpha_bar(t), schedule.alpha_bar(t_prev))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::Parameter(format!(
                "steps must lie in [1, {}], got {}",
                schedule.steps(),
                self.steps
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Parameter(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// `(t, t_prev)` pairs for a uniform stride over `[1, T]` that starts at `T`
/// and whose last step lands on 0.
pub fn timesteps(total: usize, steps: usize) -> Vec<(usize, usize)> {
    let ts: Vec<usize> = (0..steps).map(|i| (steps - i) * total / steps).collect();
    ts.iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
        .collect()
}

/// A noise predictor `eps_theta(z_t, t, C)`.
pub trait Denoiser {
    /// `z_t` is (B, C, H, W); `t` holds one timestep per batch entry or a
    /// single shared one; `text` is (B, L, D).
    fn predict(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize], &Tensor) -> Result<Tensor>,
{
    fn predict(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<Tensor> {
        self(z_t, t, text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
}

/// Called with each freshly updated latent; returns the latent the chain continues from.
pub type StepHook<'a> = dyn FnMut(StepInfo, Tensor) -> Result<Tensor> + 'a;

/// Classifier-free guided prediction `eps_u + s (eps_c - eps_u)`. Scales 0
/// and 1 evaluate only the branch they select.
pub fn guided_prediction(
    denoiser: &dyn Denoiser,
    z_t: &Tensor,
    t: usize,
    cond: &Tensor,
    uncond: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    if scale == 1.0 {
        return denoiser.predict(z_t, &[t], cond);
    }
    if scale == 0.0 {
        return denoiser.predict(z_t, &[t], uncond);
    }
    let z = Tensor::cat(&[z_t, z_t], 0);
    let text = Tensor::cat(&[uncond, cond], 0);
    let both = denoiser.predict(&z, &[t], &text)?;
    let parts = both.chunk(2, 0);
    let (eps_u, eps_c) = (&parts[0], &parts[1]);
    Ok(eps_u + (eps_c - eps_u) * scale)
}

/// Runs `cfg.steps` DDIM iterations from `z_start` (at `t = T`) down to `t = 0`.
pub fn sample(
    denoiser: &dyn Denoiser,
    z_start: &Tensor,
    cond: &Tensor,
    uncond: &Tensor,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    mut hook: Option<&mut StepHook<'_>>,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    tch::no_grad(|| {
        let mut z = z_start.shallow_clone();
        for (index, (t, t_prev)) in timesteps(schedule.steps(), cfg.steps).into_iter().enumerate() {
            let eps = guided_prediction(denoiser, &z, t, cond, uncond, cfg.guidance_scale)?;
            z = ddim_step(&z, &eps, t, t_prev, schedule)?;
            if let Some(h) = hook.as_mut() {
                z = h(StepInfo { index, t, t_prev }, z)?;
            }
            if !bool::try_from(z.isfinite().all())? {
                return Err(Error::NumericDivergence { step: index });
            }
        }
        Ok(z)
    })
}

/// Mean of squared differences between `eps` and the prediction on the
/// noised latent. Gradients flow into whatever the denoiser closes over.
pub fn denoise_loss(
    denoiser: &dyn Denoiser,
    z0: &Tensor,
    cond: &Tensor,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let z_t = add_noise_batch(z0, eps, t, schedule)?;
    let pred = denoiser.predict(&z_t, t, cond)?;
    same_shape(&pred, eps, "denoiser output")?;
    let kind = pred.kind();
    Ok((pred - eps).square().mean(kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).abs().max().double_value(&[])
    }

    #[test]
    fn zero_variance_schedule() {
        let s = NoiseSchedule::linear(1, 0.0, 0.0).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0);
    }

    #[test]
    fn default_schedule_endpoint() {
        // Cumulative product evaluated as a sum of logs in f64.
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-12);
        assert!((s.alpha_bar(1000) - 4.0358e-5).abs() < 1e-8);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, -0.1, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = randn(&mut rng, &[1, 4, 16, 16], Kind::Float);
        let eps = randn(&mut rng, &[1, 4, 16, 16], Kind::Float);
        assert!(add_noise(&z0, &eps, 0, &s).unwrap().equal(&z0));

        let zeros = Tensor::zeros([1, 4, 16, 16], (Kind::Float, tch::Device::Cpu));
        let out = add_noise(&zeros, &eps, 300, &s).unwrap();
        let expected = &eps * (1.0 - s.alpha_bar(300)).sqrt();
        assert!(max_abs_diff(&out, &expected) < 1e-6);

        let ones = Tensor::ones([2, 3], (Kind::Float, tch::Device::Cpu));
        let out = noise_latent(&ones, &ones, 0.25).unwrap();
        assert!(max_abs_diff(&out, &(ones.ones_like() * 1.366_025_4)) < 1e-6);

        assert!(matches!(
            add_noise(&z0, &ones, 3, &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::default();
        let ones = Tensor::ones([4], (Kind::Double, tch::Device::Cpu));
        let out = ddim_update(&(&ones * 1.366_025_403_784_438_6), &ones, 0.25, 0.64).unwrap();
        assert!(max_abs_diff(&out, &(&ones * 1.4)) < 1e-12);

        let z = randn(&mut ChaCha8Rng::seed_from_u64(2), &[1, 4, 16, 16], Kind::Float);
        assert!(ddim_step(&z, &z, 500, 500, &s).unwrap().equal(&z));
        assert!(matches!(ddim_step(&z, &z, 10, 11, &s), Err(Error::Parameter(_))));
    }

    #[test]
    fn timestep_stride() {
        let ts = timesteps(1000, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], (1000, 980));
        assert_eq!(ts[49], (20, 0));
        assert_eq!(timesteps(1000, 1), vec![(1000, 0)]);
        let all = timesteps(7, 7);
        assert_eq!(all.first(), Some(&(7, 6)));
        assert_eq!(all.last(), Some(&(1, 0)));
    }

    #[test]
    fn sampler_config_validation() {
        let s = NoiseSchedule::default();
        assert!(SamplerConfig::default().validate(&s).is_ok());
        let bad = SamplerConfig { steps: 0, ..Default::default() };
        assert!(bad.validate(&s).is_err());
        let bad = SamplerConfig { steps: 1001, ..Default::default() };
        assert!(bad.validate(&s).is_err());
        let bad = SamplerConfig { guidance_scale: -1.0, ..Default::default() };
        assert!(bad.validate(&s).is_err());
    }

    #[test]
    fn sampler_reports_divergence_step() {
        let s = NoiseSchedule::default();
        let z = Tensor::zeros([1, 4, 2, 2], (Kind::Float, tch::Device::Cpu));
        let text = Tensor::zeros([1, 8, 4], (Kind::Float, tch::Device::Cpu));
        let exploding = |z: &Tensor, t: &[usize], _: &Tensor| -> Result<Tensor> {
            Ok(if t[0] < 900 { z.full_like(f64::NAN) } else { z.zeros_like() })
        };
        let cfg = SamplerConfig { steps: 10, guidance_scale: 1.0, seed: 0 };
        let err = sample(&exploding, &z, &text, &text, &cfg, &s, None).unwrap_err();
        // Steps run at t = 1000, 900, 800, ...; the NaN appears at t = 800.
        assert!(matches!(err, Error::NumericDivergence { step: 2 }));
    }

    #[test]
    fn loss_closed_forms() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = randn(&mut rng, &[2, 4, 8, 8], Kind::Float);
        let eps = randn(&mut rng, &[2, 4, 8, 8], Kind::Float);
        let text = Tensor::zeros([2, 8, 4], (Kind::Float, tch::Device::Cpu));
        let exact = |_: &Tensor, _: &[usize], _: &Tensor| Ok(eps.copy());
        let loss = denoise_loss(&exact, &z0, &text, &[10, 700], &eps, &s).unwrap();
        assert_eq!(loss.double_value(&[]), 0.0);
        let off = |_: &Tensor, _: &[usize], _: &Tensor| Ok(&eps + 1.0);
        let loss = denoise_loss(&off, &z0, &text, &[10, 700], &eps, &s).unwrap();
        assert!((loss.double_value(&[]) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn forward_step_consistency(seed in 0u64..10_000, t in 1usize..=1000, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::default();
            let t_prev = ((t as f64) * frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = randn(&mut rng, &[1, 4, 16, 16], Kind::Double);
            let eps = randn(&mut rng, &[1, 4, 16, 16], Kind::Double);
            let z_t = add_noise(&z0, &eps, t, &s).unwrap();
            let stepped = ddim_step(&z_t, &eps, t, t_prev, &s).unwrap();
            let direct = add_noise(&z0, &eps, t_prev, &s).unwrap();
            prop_assert!(max_abs_diff(&stepped, &direct) < 1e-5);
        }

        #[test]
        fn loss_is_non_negative(seed in 0u64..10_000, shift in -2.0f64..2.0) {
            let s = NoiseSchedule::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = randn(&mut rng, &[1, 4, 4, 4], Kind::Float);
            let eps = randn(&mut rng, &[1, 4, 4, 4], Kind::Float);
            let text = Tensor::zeros([1, 8, 4], (Kind::Float, tch::Device::Cpu));
            let pred = |z: &Tensor, _: &[usize], _: &Tensor| Ok(z * 0.5 + shift);
            let loss = denoise_loss(&pred, &z0, &text, &[500], &eps, &s).unwrap();
            prop_assert!(loss.double_value(&[]) >= 0.0);
        }
    }
}

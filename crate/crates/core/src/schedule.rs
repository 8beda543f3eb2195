//! Discrete noise schedule shared by training and sampling.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Parameters of the scaled-linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// Constants of the public Stable Diffusion v1 checkpoints.
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.num_train_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t = (sqrt(beta_start) + t/(T-1) · (sqrt(beta_end) - sqrt(beta_start)))²`.
    pub fn scaled_linear(num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_train_steps == 0 {
            return Err(param_err!("num_train_steps must be positive"));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(param_err!(
                "beta bounds must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})"
            ));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let betas: Vec<f64> = (0..num_train_steps)
            .map(|t| {
                let frac = if num_train_steps == 1 {
                    0.0
                } else {
                    t as f64 / (num_train_steps - 1) as f64
                };
                let r = lo + frac * (hi - lo);
                r * r
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars: Vec<f64> = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let sigmas = alpha_bars.iter().map(|a| ((1.0 - a) / a).sqrt()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn num_train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_train_steps() {
            return Err(param_err!("timestep {t} outside [0, {})", self.num_train_steps()));
        }
        Ok(())
    }

    /// Forward process `sqrt(ᾱ_t)·z₀ + sqrt(1−ᾱ_t)·ε` for a single timestep.
    pub fn add_noise(&self, clean: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if clean.shape() != noise.shape() {
            return Err(param_err!(
                "add_noise shape mismatch: {:?} vs {:?}",
                clean.shape(),
                noise.shape()
            ));
        }
        let a = self.alpha_bars[t];
        Ok(((clean * a.sqrt())? + (noise * (1.0 - a).sqrt())?)?)
    }

    /// Forward process with one timestep per leading-axis item.
    pub fn add_noise_batch(&self, clean: &Tensor, noise: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if clean.shape() != noise.shape() {
            return Err(param_err!(
                "add_noise shape mismatch: {:?} vs {:?}",
                clean.shape(),
                noise.shape()
            ));
        }
        let b = clean.dim(0)?;
        if ts.len() != b {
            return Err(param_err!("{} timesteps for a batch of {b}", ts.len()));
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let mut coef_shape = vec![b];
        coef_shape.extend(std::iter::repeat(1).take(clean.rank() - 1));
        let signal: Vec<f32> = ts.iter().map(|&t| self.alpha_bars[t].sqrt() as f32).collect();
        let noise_c: Vec<f32> = ts.iter().map(|&t| (1.0 - self.alpha_bars[t]).sqrt() as f32).collect();
        let dev = clean.device();
        let signal = Tensor::from_vec(signal, coef_shape.clone(), dev)?;
        let noise_c = Tensor::from_vec(noise_c, coef_shape, dev)?;
        Ok((clean.broadcast_mul(&signal)? + noise.broadcast_mul(&noise_c)?)?)
    }

    /// Evenly spaced indices from `T−1` down to `0` (linspace, rounded half
    /// away from zero). Strictly decreasing when `n ≤ T`.
    pub fn select_timesteps(&self, num_inference_steps: usize) -> Result<Vec<usize>> {
        let t_max = self.num_train_steps();
        if num_inference_steps == 0 || num_inference_steps > t_max {
            return Err(param_err!(
                "num_inference_steps must be in [1, {t_max}], got {num_inference_steps}"
            ));
        }
        if num_inference_steps == 1 {
            return Ok(vec![t_max - 1]);
        }
        let start = (t_max - 1) as f64;
        let step = start / (num_inference_steps - 1) as f64;
        Ok((0..num_inference_steps)
            .map(|i| (start - i as f64 * step).max(0.0).round() as usize)
            .collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleConfig::default()
            .build()
            .expect("default schedule constants are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{randn, seeded_rng};
    use candle_core::Device;

    /// Independent cumulative product / sigma computation.
    fn oracle(t_max: usize, bs: f64, be: f64) -> (Vec<f64>, Vec<f64>) {
        let mut ab = Vec::new();
        let mut p = 1.0f64;
        for t in 0..t_max {
            let x = bs.sqrt() + (t as f64 / (t_max - 1) as f64) * (be.sqrt() - bs.sqrt());
            p *= 1.0 - x * x;
            ab.push(p);
        }
        let sig = ab.iter().map(|a| ((1.0 - a) / a).sqrt()).collect();
        (ab, sig)
    }

    #[test]
    fn endpoints_of_default_schedule() {
        let s = NoiseSchedule::default();
        assert!((s.betas()[0] - 0.00085).abs() < 1e-15);
        assert!((s.betas()[999] - 0.012).abs() < 1e-15);
    }

    #[test]
    fn two_step_alpha_bars() {
        let s = NoiseSchedule::scaled_linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_and_is_monotone() {
        let s = NoiseSchedule::default();
        let (ab, sig) = oracle(1000, 0.00085, 0.012);
        for t in 0..1000 {
            assert!((s.alpha_bars()[t] - ab[t]).abs() <= 1e-12 * ab[t]);
            assert!((s.sigmas()[t] - sig[t]).abs() <= 1e-12 * sig[t]);
        }
        assert!(s.sigmas()[0] > 0.0);
        assert!(s.sigmas().windows(2).all(|w| w[1] > w[0]));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // Frozen from the cumulative-product oracle.
        assert!((s.sigma(999) - 14.614641229333643).abs() < 1e-9);
        assert!((s.sigma(0) - 0.029167158151720367).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::scaled_linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::scaled_linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::scaled_linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::scaled_linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn timesteps() {
        let s = NoiseSchedule::default();
        assert_eq!(s.select_timesteps(1).unwrap(), vec![999]);
        // linspace(999, 0, 5) = [999, 749.25, 499.5, 249.75, 0]
        assert_eq!(s.select_timesteps(5).unwrap(), vec![999, 749, 500, 250, 0]);
        let full = s.select_timesteps(1000).unwrap();
        assert_eq!(full, (0..1000).rev().collect::<Vec<_>>());
        assert!(s.select_timesteps(0).is_err());
        assert!(s.select_timesteps(1001).is_err());
        for n in 1..=1000 {
            let ts = s.select_timesteps(n).unwrap();
            assert_eq!(ts.len(), n);
            assert!(ts.windows(2).all(|w| w[0] > w[1]), "n = {n}");
        }
    }

    #[test]
    fn add_noise_examples() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::scaled_linear(2, 0.1, 0.2).unwrap();
        let one = Tensor::ones(3, candle_core::DType::F32, &dev).unwrap();
        let out = s.add_noise(&one, &one, 1).unwrap().to_vec1::<f32>().unwrap();
        for v in out {
            assert!((v as f64 - 1.3776783996367752).abs() < 1e-6);
        }
        let zero = one.zeros_like().unwrap();
        let eps = Tensor::new(&[0.5f32, -1.0, 2.0], &dev).unwrap();
        let out = s.add_noise(&zero, &eps, 0).unwrap().to_vec1::<f32>().unwrap();
        let k = (1.0f64 - 0.9).sqrt() as f32;
        assert_eq!(out, vec![0.5 * k, -k, 2.0 * k]);
        assert!(s.add_noise(&one, &eps.reshape((3, 1)).unwrap(), 0).is_err());
        assert!(s.add_noise(&one, &one, 2).is_err());
    }

    #[test]
    fn batched_add_noise_matches_single() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::default();
        let mut rng = seeded_rng(3);
        let z = randn(&mut rng, (3, 2, 2, 2), &dev).unwrap();
        let e = randn(&mut rng, (3, 2, 2, 2), &dev).unwrap();
        let ts = [0usize, 400, 999];
        let batched = s.add_noise_batch(&z, &e, &ts).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let single = s.add_noise(&z.get(i).unwrap(), &e.get(i).unwrap(), t).unwrap();
            let diff = (batched.get(i).unwrap() - single)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff < 1e-6);
        }
    }

    /// E[add_noise(z, ε, t)] = sqrt(ᾱ_t)·z, checked at 3σ with 10⁴ draws.
    #[test]
    fn forward_process_mean_is_preserved() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::default();
        let mut rng = seeded_rng(11);
        let z = Tensor::new(&[0.7f32, -1.2, 0.1, 2.0], &dev).unwrap();
        let n = 10_000;
        for &t in &[0usize, 300, 999] {
            let zs = z
                .unsqueeze(0)
                .unwrap()
                .broadcast_as((n, 4))
                .unwrap()
                .contiguous()
                .unwrap();
            let eps = randn(&mut rng, (n, 4), &dev).unwrap();
            let ts = vec![t; n];
            let noised = s.add_noise_batch(&zs, &eps, &ts).unwrap();
            let mean = noised.mean(0).unwrap().to_vec1::<f32>().unwrap();
            let a = s.alpha_bars()[t];
            let tol = 3.0 * (1.0 - a).sqrt() / (n as f64).sqrt();
            for (m, zv) in mean.iter().zip(z.to_vec1::<f32>().unwrap()) {
                assert!((*m as f64 - a.sqrt() * zv as f64).abs() < tol, "t={t}");
            }
        }
    }
}

//! Euler ancestral sampling over the discrete schedule.
//!
//! Sampling runs in the sigma parameterisation `x = z₀ + σ·ε`, where the
//! training-space latent is `z_t = x / sqrt(σ² + 1)`. The predictor is
//! queried with `z_t` and its noise estimate is used directly as the Euler
//! direction.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{cfg_combine, DenoiserInput, NoisePredictor};
use crate::error::{param_err, Result};
use crate::schedule::NoiseSchedule;
use crate::util::{randn, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_inference_steps: usize,
    pub seed: u64,
    /// Classifier-free guidance weight `w`; `0` disables the second branch.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_inference_steps: 5,
            seed: 0,
            guidance_scale: 0.0,
        }
    }
}

/// Image-side conditioning held fixed across sampling steps.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(B, 1, h, w)`
    pub mask_lowres: Tensor,
    /// `(B, C, h, w)`
    pub composite_latent: Tensor,
    /// Context for the conditional branch. The unconditional branch always
    /// receives the predictor's null embedding.
    pub text: Tensor,
}

/// One ancestral Euler update from `sigma_from` to `sigma_to`.
///
/// `denoised = x − σ_from·ε̂`, `σ_up² = σ_to²(σ_from² − σ_to²)/σ_from²`,
/// `σ_down = sqrt(σ_to² − σ_up²)`. Returns `x + (σ_down − σ_from)·d + σ_up·n`
/// with `d = (x − denoised)/σ_from`; the terminal step (`σ_to = 0`) returns
/// `denoised` itself.
pub fn euler_ancestral_step(
    x: &Tensor,
    eps_pred: &Tensor,
    sigma_from: f64,
    sigma_to: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    if !(sigma_from > sigma_to && sigma_to >= 0.0) {
        return Err(param_err!(
            "sigmas must satisfy sigma_from > sigma_to >= 0, got {sigma_from} -> {sigma_to}"
        ));
    }
    if x.shape() != eps_pred.shape() || x.shape() != noise.shape() {
        return Err(param_err!("euler step operands differ in shape"));
    }
    let denoised = (x - (eps_pred * sigma_from)?)?;
    if sigma_to == 0.0 {
        return Ok(denoised);
    }
    let (from2, to2) = (sigma_from * sigma_from, sigma_to * sigma_to);
    let sigma_up = (to2 * (from2 - to2) / from2).sqrt();
    let sigma_down = (to2 - sigma_up * sigma_up).max(0.0).sqrt();
    let d = ((x - &denoised)? / sigma_from)?;
    Ok(((x + (d * (sigma_down - sigma_from))?)? + (noise * sigma_up)?)?)
}

fn guided_noise(denoiser: &dyn NoisePredictor, input: &DenoiserInput, guidance_scale: f64) -> Result<Tensor> {
    let eps_cond = denoiser.predict_noise(input)?;
    if guidance_scale == 0.0 {
        return Ok(eps_cond);
    }
    let eps_uncond = denoiser.predict_noise(&input.with_text(denoiser.null_text_embedding()?))?;
    cfg_combine(&eps_cond, &eps_uncond, guidance_scale)
}

/// Full sampling loop. The RNG stream seeded from `config.seed` is consumed
/// in a fixed order: the initial noise first, then one noise tensor per step.
pub fn sample(
    denoiser: &dyn NoisePredictor,
    cond: &Conditioning,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut rng = seeded_rng(config.seed);
    let init = randn(&mut rng, cond.composite_latent.shape(), cond.composite_latent.device())?;
    sample_from(denoiser, &init, cond, config, schedule, &mut rng)
}

/// Sampling loop from an explicit standard-normal `init_noise`; per-step
/// ancestral noise is drawn from `rng`.
pub fn sample_from<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    init_noise: &Tensor,
    cond: &Conditioning,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    run(denoiser, init_noise, cond, config, schedule, |x| {
        randn(rng, x.shape(), x.device())
    })
}

/// Batched sampling where item `i` owns the RNG stream seeded by `seeds[i]`,
/// consumed in the same order as [`sample`]. A batch of one with seed `s`
/// therefore draws exactly the noise of `sample` with `config.seed = s`.
pub fn sample_per_item(
    denoiser: &dyn NoisePredictor,
    cond: &Conditioning,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Tensor> {
    let (b, c, h, w) = cond.composite_latent.dims4()?;
    if seeds.len() != b {
        return Err(param_err!("{} seeds for a batch of {b}", seeds.len()));
    }
    let device = cond.composite_latent.device().clone();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| seeded_rng(s)).collect();
    let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Result<Tensor> {
        let parts = rngs
            .iter_mut()
            .map(|r| randn(r, (1, c, h, w), &device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let init = draw(&mut rngs)?;
    run(denoiser, &init, cond, config, schedule, |_| draw(&mut rngs))
}

fn run(
    denoiser: &dyn NoisePredictor,
    init_noise: &Tensor,
    cond: &Conditioning,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    mut step_noise: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if init_noise.shape() != cond.composite_latent.shape() {
        return Err(param_err!(
            "initial noise {:?} does not match the latent condition {:?}",
            init_noise.shape(),
            cond.composite_latent.shape()
        ));
    }
    let timesteps = schedule.select_timesteps(config.num_inference_steps)?;
    let mut sigmas: Vec<f64> = timesteps.iter().map(|&t| schedule.sigma(t)).collect();
    sigmas.push(0.0);
    let batch = init_noise.dim(0)?;

    let mut x = (init_noise * (sigmas[0] * sigmas[0] + 1.0).sqrt())?;
    let base = DenoiserInput::new(
        init_noise.clone(),
        cond.mask_lowres.clone(),
        cond.composite_latent.clone(),
        vec![timesteps[0]; batch],
        cond.text.clone(),
    )?;
    for (i, &t) in timesteps.iter().enumerate() {
        let (s_from, s_to) = (sigmas[i], sigmas[i + 1]);
        let model_in = (&x / (s_from * s_from + 1.0).sqrt())?;
        let eps = guided_noise(
            denoiser,
            &base.with_noisy(model_in, vec![t; batch]),
            config.guidance_scale,
        )?
        .detach();
        let noise = step_noise(&x)?;
        x = euler_ancestral_step(&x, &eps, s_from, s_to, &noise)?;
    }
    Ok(x)
}

//! Stage-one diffusion fine-tuning: ε-prediction loss, piecewise-constant
//! learning rate, EMA weights and resumable state.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::LatentCodec;
use crate::dataset::{augment, AugmentConfig, Triplet};
use crate::denoiser::{ConditionalUnet, DenoiserConfig, DenoiserInput, NoisePredictor};
use crate::error::{param_err, Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::optim::{Adam, AdamParams};
use crate::schedule::NoiseSchedule;
use crate::util::{randn, seeded_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub phase1_steps: u64,
    pub lr_phase2: f64,
    pub phase2_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub ema_decay: f64,
    pub train_resolution: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// The published recipe.
    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            lr_phase1: 1e-5,
            phase1_steps: 150_000,
            lr_phase2: 1e-6,
            phase2_steps: 50_000,
            beta1: 0.9,
            beta2: 0.999,
            ema_decay: 0.9999,
            train_resolution: 512,
            seed: 0,
        }
    }

    /// Desk-scale settings for 64px synthetic data.
    pub fn toy() -> Self {
        Self {
            batch_size: 32,
            lr_phase1: 1e-3,
            phase1_steps: 5000,
            lr_phase2: 2e-4,
            phase2_steps: 1000,
            ema_decay: 0.995,
            train_resolution: 64,
            ..Self::paper()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps() == 0 {
            return Err(param_err!("batch size and step counts must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(param_err!("EMA decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(param_err!("learning rates must be positive"));
        }
        Ok(())
    }
}

/// `lr_phase1` before `phase1_steps`, `lr_phase2` afterwards (including past
/// the horizon).
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    if step < config.phase1_steps {
        config.lr_phase1
    } else {
        config.lr_phase2
    }
}

/// Exponential moving average of named weights.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: Vec<(String, Tensor)>,
    pub decay: f64,
    pub updates: u64,
}

impl EmaState {
    pub fn new(weights: &[(String, Tensor)], decay: f64) -> Result<Self> {
        let shadow = weights
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.detach().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shadow,
            decay,
            updates: 0,
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·current`, evaluated as
    /// `shadow + (1 − decay)·(current − shadow)` so that a shadow equal to
    /// the current weights stays bit-identical.
    pub fn update(&mut self, current: &[(String, Tensor)]) -> Result<()> {
        if current.len() != self.shadow.len() {
            return Err(param_err!(
                "EMA tracks {} tensors, got {}",
                self.shadow.len(),
                current.len()
            ));
        }
        let d = self.decay;
        for ((name, s), (cname, c)) in self.shadow.iter_mut().zip(current) {
            if name != cname || s.shape() != c.shape() {
                return Err(param_err!(
                    "EMA entry {name} {:?} does not match {cname} {:?}",
                    s.shape(),
                    c.shape()
                ));
            }
            *s = (&*s + ((c.detach() - &*s)? * (1.0 - d))?)?;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<String, Tensor> {
        self.shadow.iter().cloned().collect()
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update(mut ema: EmaState, current: &[(String, Tensor)]) -> Result<EmaState> {
    ema.update(current)?;
    Ok(ema)
}

/// Pre-encoded training data: latents of the ground truth and composite
/// plus the latent-resolution mask.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    pub ids: Vec<String>,
    /// `(N, C, h, w)`
    pub gt_latents: Tensor,
    /// `(N, C, h, w)`
    pub composite_latents: Tensor,
    /// `(N, 1, h, w)`
    pub masks: Tensor,
}

impl LatentDataset {
    /// Encodes each triplet at `resolution` with the deterministic encoder.
    pub fn encode(codec: &dyn LatentCodec, samples: &[(String, Triplet)], resolution: usize) -> Result<Self> {
        let views: Vec<(String, Triplet)> = samples
            .iter()
            .map(|(id, t)| (id.clone(), t.resize(resolution)))
            .collect();
        Self::encode_views(codec, &views)
    }

    /// `views` randomly cropped and flipped copies of every triplet.
    pub fn encode_augmented(
        codec: &dyn LatentCodec,
        samples: &[(String, Triplet)],
        resolution: usize,
        views: usize,
        config: &AugmentConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut out = Vec::with_capacity(samples.len() * views);
        for _ in 0..views {
            for (id, t) in samples {
                out.push((id.clone(), augment(t, resolution, config, &mut rng)?.0));
            }
        }
        Self::encode_views(codec, &out)
    }

    fn encode_views(codec: &dyn LatentCodec, views: &[(String, Triplet)]) -> Result<Self> {
        if views.is_empty() {
            return Err(param_err!("no training samples"));
        }
        let device = codec.device();
        let f = codec.downsample_factor();
        let mut gts = Vec::new();
        let mut comps = Vec::new();
        let mut masks = Vec::new();
        for chunk in views.chunks(32) {
            let real: Vec<&RgbImage> = chunk.iter().map(|(_, t)| &t.real).collect();
            let comp: Vec<&RgbImage> = chunk.iter().map(|(_, t)| &t.composite).collect();
            gts.push(codec.encode(&RgbImage::stack(&real, &device)?, None)?.detach());
            comps.push(codec.encode(&RgbImage::stack(&comp, &device)?, None)?.detach());
            let low: Vec<Mask> = chunk
                .iter()
                .map(|(_, t)| {
                    let (h, w) = t.mask.dims();
                    t.mask.resize_nearest(w / f, h / f)
                })
                .collect();
            masks.push(Mask::stack(&low.iter().collect::<Vec<_>>(), &device)?);
        }
        Ok(Self {
            ids: views.iter().map(|(id, _)| id.clone()).collect(),
            gt_latents: Tensor::cat(&gts, 0)?,
            composite_latents: Tensor::cat(&comps, 0)?,
            masks: Tensor::cat(&masks, 0)?,
        })
    }

    /// Joins datasets encoded in pieces, keeping their order.
    pub fn concat(parts: Vec<LatentDataset>) -> Result<Self> {
        if parts.is_empty() {
            return Err(param_err!("no training samples"));
        }
        let cat = |f: fn(&LatentDataset) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&parts.iter().map(f).collect::<Vec<_>>(), 0)?)
        };
        Ok(Self {
            gt_latents: cat(|p| &p.gt_latents)?,
            composite_latents: cat(|p| &p.composite_latents)?,
            masks: cat(|p| &p.masks)?,
            ids: parts.into_iter().flat_map(|p| p.ids).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<LatentBatch> {
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            self.gt_latents.device(),
        )?;
        Ok(LatentBatch {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            gt_latent: self.gt_latents.index_select(&idx, 0)?,
            composite_latent: self.composite_latents.index_select(&idx, 0)?,
            mask_lowres: self.masks.index_select(&idx, 0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub ids: Vec<String>,
    pub gt_latent: Tensor,
    pub composite_latent: Tensor,
    pub mask_lowres: Tensor,
}

/// ε-prediction MSE for one batch: per item a uniform timestep, the noised
/// ground-truth latent, and the composite/mask condition. Returns the loss
/// tensor, still attached to the model graph.
pub fn diffusion_loss<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    batch: &LatentBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let b = batch.gt_latent.dim(0)?;
    let ts: Vec<usize> = (0..b)
        .map(|_| rng.random_range(0..schedule.num_train_steps()))
        .collect();
    let noise = randn(rng, batch.gt_latent.shape(), batch.gt_latent.device())?;
    let noisy = schedule.add_noise_batch(&batch.gt_latent, &noise, &ts)?;
    let input = DenoiserInput::new(
        noisy,
        batch.mask_lowres.clone(),
        batch.composite_latent.clone(),
        ts,
        denoiser.null_text_embedding()?,
    )?;
    let eps = denoiser.predict_noise(&input)?;
    Ok((eps - noise)?.sqr()?.mean_all()?)
}

/// Owns the model, optimizer, EMA and the single RNG stream that drives
/// batch selection, timesteps and noise.
pub struct DiffusionTrainer {
    pub config: TrainConfig,
    pub unet: ConditionalUnet,
    pub ema: EmaState,
    pub schedule: NoiseSchedule,
    opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

impl DiffusionTrainer {
    pub fn new(unet: ConditionalUnet, config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(
            unet.params().vars(),
            AdamParams {
                lr: lr_schedule(0, &config),
                beta1: config.beta1,
                beta2: config.beta2,
                ..Default::default()
            },
        )?;
        let ema = EmaState::new(&unet.params().tensors(), config.ema_decay)?;
        Ok(Self {
            rng: seeded_rng(config.seed),
            config,
            unet,
            ema,
            schedule,
            opt,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer step on `batch`; returns the loss.
    pub fn train_step(&mut self, batch: &LatentBatch) -> Result<f32> {
        let lr = lr_schedule(self.step, &self.config);
        self.opt.set_learning_rate(lr);
        let loss = diffusion_loss(&self.unet, batch, &self.schedule, &mut self.rng)?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "diffusion loss is {value} at step {} (lr {lr}, batch {:?})",
                self.step, batch.ids
            )));
        }
        self.opt.backward_step(&loss)?;
        self.ema.update(&self.unet.params().tensors())?;
        self.step += 1;
        Ok(value)
    }

    /// Draws a batch (with replacement) and trains on it.
    pub fn train_step_sampled(&mut self, data: &LatentDataset) -> Result<f32> {
        if data.is_empty() {
            return Err(param_err!("empty training set"));
        }
        let idx: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..data.len()))
            .collect();
        let batch = data.batch(&idx)?;
        self.train_step(&batch)
    }

    /// Trains until `config.total_steps()`, calling `on_step(step, loss)`
    /// after each step.
    pub fn fit(&mut self, data: &LatentDataset, mut on_step: impl FnMut(u64, f32)) -> Result<Vec<f32>> {
        let mut losses = Vec::new();
        while self.step < self.config.total_steps() {
            let l = self.train_step_sampled(data)?;
            on_step(self.step, l);
            losses.push(l);
        }
        Ok(losses)
    }

    /// A model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<ConditionalUnet> {
        let m = ConditionalUnet::new(self.unet.config().clone(), 0, &self.unet.device())?;
        m.params().load(&self.ema.as_map())?;
        Ok(m)
    }

    /// Raw weights, EMA weights, optimizer moments and the RNG position.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new("denoiser-train", &self.unet.config(), self.step)?
            .with_tensors("model", self.unet.params().tensors())
            .with_tensors("ema", self.ema.shadow.clone())
            .with_tensors("optim", self.opt.state());
        ck.meta
            .insert("train_config".into(), serde_json::to_string(&self.config)?);
        ck.meta.insert(
            "rng_seed".into(),
            self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        );
        ck.meta
            .insert("rng_word_pos".into(), self.rng.get_word_pos().to_string());
        ck.meta.insert("ema_updates".into(), self.ema.updates.to_string());
        ck.save(path)
    }

    /// Restores a trainer saved with [`save`](Self::save); the step counter,
    /// RNG position and optimizer state continue where they stopped.
    pub fn resume(path: impl AsRef<Path>, device: &Device, schedule: NoiseSchedule) -> Result<Self> {
        let ck = Checkpoint::load(path, device)?;
        ck.expect_kind("denoiser-train")?;
        let unet_cfg: DenoiserConfig = ck.config_as()?;
        let cfg: TrainConfig = serde_json::from_str(
            ck.meta
                .get("train_config")
                .ok_or_else(|| Error::Checkpoint("missing train_config".into()))?,
        )?;
        let unet = ConditionalUnet::new(unet_cfg, 0, device)?;
        unet.params().load(&ck.group("model"))?;
        let mut t = Self::new(unet, cfg, schedule)?;
        let ema = ck.group("ema");
        for (name, s) in t.ema.shadow.iter_mut() {
            *s = ema
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing EMA tensor {name}")))?
                .clone();
        }
        t.ema.updates = meta_parse(&ck, "ema_updates")?;
        t.opt.load_state(&ck.group("optim"), ck.step)?;
        let hex = ck
            .meta
            .get("rng_seed")
            .ok_or_else(|| Error::Checkpoint("missing rng_seed".into()))?;
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(hex.get(2 * i..2 * i + 2).unwrap_or(""), 16)
                .map_err(|_| Error::Checkpoint("unreadable rng_seed".into()))?;
        }
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_word_pos(meta_parse(&ck, "rng_word_pos")?);
        t.step = ck.step;
        Ok(t)
    }
}

fn meta_parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("missing or unreadable `{key}`")))
}

/// Noise-prediction MSE of `denoiser` on `data`, with timesteps and noise
/// drawn from `seed`; the basis for comparing against a zero predictor.
pub fn noise_mse(
    denoiser: &dyn NoisePredictor,
    data: &LatentDataset,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let batch = data.batch(chunk)?;
        let loss = diffusion_loss(denoiser, &batch, schedule, &mut rng)?;
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, KlAutoencoder};

    fn toy_dataset(n: usize, seed: u64) -> LatentDataset {
        let mut rng = seeded_rng(seed);
        let dev = Device::Cpu;
        LatentDataset {
            ids: (0..n).map(|i| format!("s{i}")).collect(),
            gt_latents: randn(&mut rng, (n, 4, 8, 8), &dev).unwrap(),
            composite_latents: randn(&mut rng, (n, 4, 8, 8), &dev).unwrap(),
            masks: Tensor::ones((n, 1, 8, 8), DType::F32, &dev).unwrap(),
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            phase1_steps: 3,
            phase2_steps: 3,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn learning_rate_phases() {
        let p = TrainConfig::paper();
        assert_eq!(lr_schedule(0, &p), 1e-5);
        assert_eq!(lr_schedule(149_999, &p), 1e-5);
        assert_eq!(lr_schedule(150_000, &p), 1e-6);
        assert_eq!(lr_schedule(10_000_000, &p), 1e-6);
        let toy = TrainConfig {
            phase1_steps: 100,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            ..TrainConfig::toy()
        };
        assert_eq!(lr_schedule(99, &toy), 1e-3);
        assert_eq!(lr_schedule(100, &toy), 1e-4);
    }

    fn scalar(v: f32) -> Vec<(String, Tensor)> {
        vec![("w".into(), Tensor::new(&[v], &Device::Cpu).unwrap())]
    }

    fn value(e: &EmaState) -> f32 {
        e.shadow[0].1.to_vec1::<f32>().unwrap()[0]
    }

    #[test]
    fn ema_arithmetic() {
        let e = ema_update(EmaState::new(&scalar(0.0), 0.9999).unwrap(), &scalar(1.0)).unwrap();
        assert_eq!(value(&e), 0.0001f32);
        let e = ema_update(EmaState::new(&scalar(0.7), 0.9999).unwrap(), &scalar(0.7)).unwrap();
        assert_eq!(value(&e), 0.7);
        let e = ema_update(EmaState::new(&scalar(0.3), 0.0).unwrap(), &scalar(2.5)).unwrap();
        assert_eq!(value(&e), 2.5);
        let mut e = EmaState::new(&scalar(0.0), 0.5).unwrap();
        let mut prev = 1.0f32;
        for _ in 0..100 {
            e.update(&scalar(1.0)).unwrap();
            let gap = 1.0 - value(&e);
            assert!(gap <= 0.5 * prev);
            prev = gap;
        }
        let bad = vec![("w".into(), Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap())];
        assert!(matches!(e.update(&bad), Err(Error::Param(_))));
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        struct Exact {
            z0: Tensor,
            schedule: NoiseSchedule,
        }
        impl NoisePredictor for Exact {
            fn latent_channels(&self) -> usize {
                4
            }
            fn null_text_embedding(&self) -> Result<Tensor> {
                Ok(Tensor::zeros((1, 1), DType::F32, &Device::Cpu)?)
            }
            fn predict_noise(&self, input: &DenoiserInput) -> Result<Tensor> {
                let mut out = Vec::new();
                for (i, &t) in input.timesteps.iter().enumerate() {
                    let ab = self.schedule.alpha_bars()[t];
                    let zt = input.noisy_latent.narrow(0, i, 1)?;
                    let z0 = self.z0.narrow(0, i, 1)?;
                    out.push(((zt - (z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?);
                }
                Ok(Tensor::cat(&out, 0)?)
            }
        }
        let data = toy_dataset(4, 0);
        let batch = data.batch(&[0, 1, 2, 3]).unwrap();
        let schedule = NoiseSchedule::default();
        let exact = Exact {
            z0: batch.gt_latent.clone(),
            schedule: schedule.clone(),
        };
        let loss = diffusion_loss(&exact, &batch, &schedule, &mut seeded_rng(1)).unwrap();
        assert!(loss.to_scalar::<f32>().unwrap() < 1e-8);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let data = toy_dataset(8, 1);
        let run = || {
            let unet = ConditionalUnet::new(DenoiserConfig::toy(), 3, &Device::Cpu).unwrap();
            let mut t = DiffusionTrainer::new(unet, small_config(), NoiseSchedule::default()).unwrap();
            t.fit(&data, |_, _| {}).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, run());
    }

    #[test]
    fn resume_reproduces_subsequent_losses() {
        let data = toy_dataset(8, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let unet = ConditionalUnet::new(DenoiserConfig::toy(), 3, &Device::Cpu).unwrap();
        let mut t = DiffusionTrainer::new(unet, small_config(), NoiseSchedule::default()).unwrap();
        for _ in 0..2 {
            t.train_step_sampled(&data).unwrap();
        }
        t.save(&path).unwrap();
        let rest_a: Vec<f32> = (0..3).map(|_| t.train_step_sampled(&data).unwrap()).collect();
        let mut r = DiffusionTrainer::resume(&path, &Device::Cpu, NoiseSchedule::default()).unwrap();
        assert_eq!(r.step(), 2);
        let rest_b: Vec<f32> = (0..3).map(|_| r.train_step_sampled(&data).unwrap()).collect();
        assert_eq!(rest_a, rest_b);
        assert_eq!(r.step(), 5);
    }

    #[test]
    fn codec_is_untouched_by_diffusion_training() {
        let codec = KlAutoencoder::new(CodecConfig::toy(), 0, &Device::Cpu).unwrap();
        let before = codec.params().tensors();
        let triplets: Vec<(String, Triplet)> = (0..4)
            .map(|i| {
                let img = RgbImage::filled(32, 32, [0.1 * i as f32, 0.0, -0.2]);
                (
                    format!("s{i}"),
                    Triplet {
                        composite: img.clone(),
                        mask: Mask::from_fn(32, 32, |x, _| x < 16),
                        real: img,
                    },
                )
            })
            .collect();
        let data = LatentDataset::encode(&codec, &triplets, 32).unwrap();
        assert_eq!(data.gt_latents.dims(), &[4, 4, 4, 4]);
        let unet = ConditionalUnet::new(DenoiserConfig::toy(), 3, &Device::Cpu).unwrap();
        let mut t = DiffusionTrainer::new(unet, small_config(), NoiseSchedule::default()).unwrap();
        t.fit(&data, |_, _| {}).unwrap();
        let after = codec.params().tensors();
        assert_eq!(crate::vars::max_abs_diff(&before, &after).unwrap(), 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let unet = ConditionalUnet::new(DenoiserConfig::toy(), 3, &Device::Cpu).unwrap();
        let cfg = TrainConfig {
            ema_decay: 1.0,
            ..small_config()
        };
        assert!(DiffusionTrainer::new(unet, cfg, NoiseSchedule::default()).is_err());
    }
}

//! KL-regularised image autoencoder mapping images to `1/f`-resolution latents.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::imaging::RgbImage;
use crate::metrics;
use crate::optim::{Adam, AdamParams};
use crate::util::{randn, seeded_rng};
use crate::vars::ParamStore;

/// Published latent scaling constant of the Stable Diffusion v1 autoencoder.
pub const PRETRAINED_SCALING_FACTOR: f64 = 0.18215;

/// Image ↔ latent mapping used by the harmonization stage.
///
/// Latents handed to diffusion are `scaling_factor · z`; the factor is applied
/// once in [`encode`](LatentCodec::encode) and removed once in
/// [`decode`](LatentCodec::decode).
pub trait LatentCodec: Send + Sync {
    fn downsample_factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    fn scaling_factor(&self) -> f64;

    /// Posterior mean and log-variance of unscaled latents for `(B, 3, H, W)` images.
    fn moments(&self, images: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Unscaled latents to `(B, 3, H·f, W·f)` images, unclamped.
    fn decode_unscaled(&self, latents: &Tensor) -> Result<Tensor>;

    fn device(&self) -> Device {
        Device::Cpu
    }

    /// Scaled latents; the posterior mean when `rng` is `None`, a posterior
    /// sample otherwise.
    fn encode(&self, images: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let f = self.downsample_factor();
        if c != 3 {
            return Err(param_err!("codec expects RGB input, got {c} channels"));
        }
        if h % f != 0 || w % f != 0 {
            return Err(param_err!(
                "image size {h}x{w} is not divisible by the downsample factor {f}"
            ));
        }
        let (mean, logvar) = self.moments(images)?;
        let z = match rng {
            None => mean,
            Some(rng) => {
                let std = (logvar * 0.5)?.exp()?;
                let eps = randn(rng, mean.shape(), mean.device())?;
                (mean + (std * eps)?)?
            }
        };
        Ok((z * self.scaling_factor())?)
    }

    /// Images in `[-1, 1]` from scaled latents.
    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.latent_channels() {
            return Err(param_err!(
                "latent has {c} channels, codec expects {}",
                self.latent_channels()
            ));
        }
        let z = (latents / self.scaling_factor())?;
        Ok(self.decode_unscaled(&z)?.clamp(-1f32, 1f32)?)
    }
}

/// Deterministic round trip of one image.
pub fn round_trip(codec: &dyn LatentCodec, image: &RgbImage) -> Result<RgbImage> {
    let x = image.to_tensor(&codec.device())?.unsqueeze(0)?;
    let z = codec.encode(&x, None)?;
    RgbImage::from_tensor(&codec.decode(&z)?)
}

/// Pass-through codec (`f = 1`, three latent channels).
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn downsample_factor(&self) -> usize {
        1
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn scaling_factor(&self) -> f64 {
        1.0
    }

    fn moments(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((images.clone(), (images.zeros_like()? - 30.0)?))
    }

    fn decode_unscaled(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub latent_channels: usize,
    /// Must be a power of two; one stride-2 stage per factor of two.
    pub downsample_factor: usize,
    /// Feature widths from full resolution down; `log2(f) + 1` entries.
    pub widths: Vec<usize>,
}

impl CodecConfig {
    pub fn toy() -> Self {
        Self {
            latent_channels: 4,
            downsample_factor: 8,
            widths: vec![16, 32, 48, 64],
        }
    }

    /// Block widths of the public Stable Diffusion autoencoder.
    pub fn full() -> Self {
        Self {
            latent_channels: 4,
            downsample_factor: 8,
            widths: vec![128, 256, 512, 512],
        }
    }

    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return Err(param_err!(
                "downsample factor must be a power of two >= 2, got {}",
                self.downsample_factor
            ));
        }
        if self.widths.len() != self.stages() + 1 {
            return Err(param_err!(
                "codec needs {} widths for factor {}, got {}",
                self.stages() + 1,
                self.downsample_factor,
                self.widths.len()
            ));
        }
        if self.latent_channels == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(param_err!("codec widths must be positive"));
        }
        Ok(())
    }
}

fn conv(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(
        cin,
        cout,
        3,
        Conv2dConfig {
            padding: 1,
            stride,
            ..Default::default()
        },
        vb,
    )
}

/// Trainable convolutional KL autoencoder.
pub struct KlAutoencoder {
    config: CodecConfig,
    scaling_factor: f64,
    params: ParamStore,
    device: Device,
    enc_in: Conv2d,
    enc_stages: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_stages: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
}

impl KlAutoencoder {
    pub fn new(config: CodecConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(seed);
        let vb = params.var_builder(device);
        let w = &config.widths;
        let c = config.latent_channels;

        let enc_in = conv(3, w[0], 1, vb.pp("encoder.conv_in"))?;
        let mut enc_stages = Vec::new();
        for i in 0..config.stages() {
            let vbs = vb.pp(format!("encoder.stage.{i}"));
            enc_stages.push((
                conv(w[i], w[i + 1], 2, vbs.pp("down"))?,
                conv(w[i + 1], w[i + 1], 1, vbs.pp("conv"))?,
            ));
        }
        let enc_out = conv(w[config.stages()], 2 * c, 1, vb.pp("encoder.conv_out"))?;

        let dec_in = conv(c, w[config.stages()], 1, vb.pp("decoder.conv_in"))?;
        let mut dec_stages = Vec::new();
        for i in (0..config.stages()).rev() {
            let vbs = vb.pp(format!("decoder.stage.{i}"));
            dec_stages.push((
                conv(w[i + 1], w[i], 1, vbs.pp("up"))?,
                conv(w[i], w[i], 1, vbs.pp("conv"))?,
            ));
        }
        let dec_out = conv(w[0], 3, 1, vb.pp("decoder.conv_out"))?;

        Ok(Self {
            config,
            scaling_factor: 1.0,
            params,
            device: device.clone(),
            enc_in,
            enc_stages,
            enc_out,
            dec_in,
            dec_stages,
            dec_out,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_scaling_factor(&mut self, s: f64) -> Result<()> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(param_err!("scaling factor must be positive, got {s}"));
        }
        self.scaling_factor = s;
        Ok(())
    }

    /// `1 / std` of posterior-mean latents over `images`.
    pub fn fit_scaling_factor(&mut self, images: &[RgbImage]) -> Result<f64> {
        let mut sum = 0f64;
        let mut sum_sq = 0f64;
        let mut n = 0usize;
        for chunk in images.chunks(16) {
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            let x = RgbImage::stack(&refs, &self.device)?;
            let (mean, _) = self.moments(&x)?;
            let v = mean.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            n += v.len();
            sum += v.iter().sum::<f64>();
            sum_sq += v.iter().map(|x| x * x).sum::<f64>();
        }
        if n < 2 {
            return Err(param_err!("need at least one image to fit the scaling factor"));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(1e-12);
        let s = 1.0 / var.sqrt();
        self.set_scaling_factor(s)?;
        Ok(s)
    }

    fn forward_train(&self, x: &Tensor, rng: &mut dyn RngCore, kl_weight: f64) -> Result<(Tensor, Tensor, Tensor)> {
        let (mean, logvar) = self.moments(x)?;
        let std = (&logvar * 0.5)?.exp()?;
        let eps = randn(rng, mean.shape(), &self.device)?;
        let z = (&mean + (&std * eps)?)?;
        let recon = self.decode_unscaled(&z)?;
        let rec = (recon - x)?.sqr()?.mean_all()?;
        // KL(q || N(0, I)) summed over latent elements, averaged over the batch.
        let b = x.dim(0)? as f64;
        let kl = (((mean.sqr()? + logvar.exp()?)? - 1.0)? - &logvar)?.sum_all()?;
        let kl = ((kl * 0.5)? / b)?;
        let total = (&rec + (&kl * kl_weight)?)?;
        Ok((total, rec, kl))
    }
}

impl LatentCodec for KlAutoencoder {
    fn downsample_factor(&self) -> usize {
        self.config.downsample_factor
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn scaling_factor(&self) -> f64 {
        self.scaling_factor
    }

    fn device(&self) -> Device {
        self.device.clone()
    }

    fn moments(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.enc_in.forward(images)?.silu()?;
        for (down, conv) in &self.enc_stages {
            h = down.forward(&h)?.silu()?;
            h = (&h + conv.forward(&h)?.silu()?)?;
        }
        let out = self.enc_out.forward(&h)?;
        let c = self.config.latent_channels;
        let mean = out.narrow(1, 0, c)?;
        let logvar = out.narrow(1, c, c)?.clamp(-30f32, 20f32)?;
        Ok((mean, logvar))
    }

    fn decode_unscaled(&self, latents: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(latents)?.silu()?;
        for (up, conv) in &self.dec_stages {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            h = up.forward(&h)?.silu()?;
            h = (&h + conv.forward(&h)?.silu()?)?;
        }
        Ok(self.dec_out.forward(&h)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Square random-crop size; must divide by the downsample factor.
    pub crop_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            crop_size: 32,
            lr: 2e-3,
            kl_weight: 1e-6,
            seed: 0,
        }
    }
}

pub struct CodecTrainReport {
    pub losses: Vec<f32>,
    pub scaling_factor: f64,
}

fn random_crop<R: Rng>(img: &RgbImage, size: usize, rng: &mut R) -> Result<RgbImage> {
    let (h, w) = img.dims();
    if h < size || w < size {
        return Err(param_err!("image {w}x{h} smaller than crop {size}"));
    }
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    let crop = img.crop(x0, y0, size, size)?;
    Ok(if rng.random_bool(0.5) {
        crop.flip_horizontal()
    } else {
        crop
    })
}

/// Trains a fresh autoencoder on random crops of `images`, then fits the
/// latent scaling factor on (up to 256 of) the full images.
pub fn train_codec(
    images: &[RgbImage],
    config: &CodecConfig,
    train: &CodecTrainConfig,
    device: &Device,
) -> Result<(KlAutoencoder, CodecTrainReport)> {
    if images.is_empty() {
        return Err(param_err!("codec training set is empty"));
    }
    if train.crop_size % config.downsample_factor != 0 || train.batch_size == 0 {
        return Err(param_err!(
            "crop size {} must be divisible by {}",
            train.crop_size,
            config.downsample_factor
        ));
    }
    let mut codec = KlAutoencoder::new(config.clone(), train.seed, device)?;
    let mut opt = Adam::new(
        codec.params().vars(),
        AdamParams {
            lr: train.lr,
            ..Default::default()
        },
    )?;
    let mut rng = seeded_rng(train.seed ^ 0x5eed_c0de);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut crops = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            crops.push(random_crop(&images[order[cursor]], train.crop_size, &mut rng)?);
            cursor += 1;
        }
        let refs: Vec<&RgbImage> = crops.iter().collect();
        let x = RgbImage::stack(&refs, device)?;
        let (loss, rec, kl) = codec.forward_train(&x, &mut rng, train.kl_weight)?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "codec loss is {value} at step {step} (lr {}, reconstruction {}, kl {})",
                opt.learning_rate(),
                rec.to_scalar::<f32>()?,
                kl.to_scalar::<f32>()?
            )));
        }
        opt.backward_step(&loss)?;
        losses.push(value);
        if step % 250 == 0 {
            log::debug!("codec step {step}: loss {value:.5}");
        }
    }
    let fit: Vec<RgbImage> = images.iter().take(256).cloned().collect();
    let scaling_factor = codec.fit_scaling_factor(&fit)?;
    Ok((codec, CodecTrainReport { losses, scaling_factor }))
}

/// Mean per-image MSE (0–255 scale) of the deterministic round trip at
/// `resolution`. Each original is first resized to `resolution`; the
/// original and its reconstruction are then both resized to
/// `compare_resolution` before comparison.
pub fn reconstruction_error(
    images: &[RgbImage],
    codec: &dyn LatentCodec,
    resolution: usize,
    compare_resolution: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(param_err!("reconstruction error of an empty batch"));
    }
    if resolution % codec.downsample_factor() != 0 {
        return Err(param_err!(
            "resolution {resolution} is not divisible by {}",
            codec.downsample_factor()
        ));
    }
    let mut total = 0.0;
    for img in images {
        let orig = img.resize_square(resolution);
        let rt = round_trip(codec, &orig)?;
        let a = orig.resize_square(compare_resolution);
        let b = rt.resize_square(compare_resolution);
        total += metrics::mse(&b, &a)?;
    }
    Ok(total / images.len() as f64)
}

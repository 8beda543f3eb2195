//! Conditional noise predictor.
//!
//! The UNet receives the noisy latent concatenated channel-wise with the
//! nearest-downsampled foreground mask and the latent of the full composite
//! image, i.e. `2·C + 1` input channels, the layout of an inpainting UNet.
//! Text enters only through cross-attention on a context embedding, which is
//! always the (learned, constant) null-prompt embedding here.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::vars::ParamStore;

/// Everything the noise predictor sees for one batch.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    /// `(B, C, h, w)`
    pub noisy_latent: Tensor,
    /// `(B, 1, h, w)` with values in `{0, 1}`
    pub mask_lowres: Tensor,
    /// `(B, C, h, w)`
    pub composite_latent: Tensor,
    /// One training-schedule index per batch item.
    pub timesteps: Vec<usize>,
    /// `(L, D)` context shared by the batch, or `(B, L, D)`.
    pub text_condition: Tensor,
}

impl DenoiserInput {
    pub fn new(
        noisy_latent: Tensor,
        mask_lowres: Tensor,
        composite_latent: Tensor,
        timesteps: Vec<usize>,
        text_condition: Tensor,
    ) -> Result<Self> {
        let input = Self {
            noisy_latent,
            mask_lowres,
            composite_latent,
            timesteps,
            text_condition,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, _, h, w) = self.noisy_latent.dims4()?;
        let (mb, _, mh, mw) = self.mask_lowres.dims4()?;
        let (cb, _, ch, cw) = self.composite_latent.dims4()?;
        if (mb, mh, mw) != (b, h, w) || (cb, ch, cw) != (b, h, w) {
            return Err(param_err!(
                "denoiser inputs disagree: noisy {:?}, mask {:?}, composite {:?}",
                self.noisy_latent.shape(),
                self.mask_lowres.shape(),
                self.composite_latent.shape()
            ));
        }
        if self.timesteps.len() != b {
            return Err(param_err!("{} timesteps for a batch of {b}", self.timesteps.len()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.timesteps.len()
    }

    /// `noisy ⊕ mask ⊕ composite` along the channel axis.
    pub fn concat_channels(&self) -> Result<Tensor> {
        self.validate()?;
        Ok(Tensor::cat(
            &[&self.noisy_latent, &self.mask_lowres, &self.composite_latent],
            1,
        )?)
    }

    pub fn with_noisy(&self, noisy_latent: Tensor, timesteps: Vec<usize>) -> Self {
        Self {
            noisy_latent,
            timesteps,
            ..self.clone()
        }
    }

    pub fn with_text(&self, text_condition: Tensor) -> Self {
        Self {
            text_condition,
            ..self.clone()
        }
    }
}

/// A network that estimates the noise in `noisy_latent`.
pub trait NoisePredictor: Send + Sync {
    fn latent_channels(&self) -> usize;

    /// Embedding of the empty prompt; constant across calls.
    fn null_text_embedding(&self) -> Result<Tensor>;

    fn predict_noise(&self, input: &DenoiserInput) -> Result<Tensor>;

    fn device(&self) -> Device {
        Device::Cpu
    }
}

/// Classifier-free guidance: `(1 + w)·ε_cond − w·ε_uncond`, evaluated as
/// `ε_cond + w·(ε_cond − ε_uncond)` so equal branches pass through unchanged.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(param_err!(
            "guidance branches differ in shape: {:?} vs {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        ));
    }
    if !(w >= 0.0) {
        return Err(param_err!("guidance scale must be non-negative, got {w}"));
    }
    if w == 0.0 {
        return Ok(eps_cond.clone());
    }
    Ok((eps_cond + ((eps_cond - eps_uncond)? * w)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per resolution level; the UNet halves resolution
    /// between consecutive levels.
    pub channel_mult: Vec<usize>,
    /// Levels (indices into `channel_mult`) that get cross-attention.
    pub attention_levels: Vec<usize>,
    pub num_res_blocks: usize,
    pub context_length: usize,
    pub context_dim: usize,
    pub norm_groups: usize,
}

impl DenoiserConfig {
    /// Small enough to train on a CPU in minutes over 8×8 latents.
    pub fn toy() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            channel_mult: vec![1, 2],
            attention_levels: vec![1],
            num_res_blocks: 1,
            context_length: 4,
            context_dim: 32,
            norm_groups: 8,
        }
    }

    /// Block layout of the public Stable Diffusion inpainting UNet. Only the
    /// `pretrained` adapter can populate it with weights.
    pub fn full() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 320,
            channel_mult: vec![1, 2, 4, 4],
            attention_levels: vec![0, 1, 2],
            num_res_blocks: 2,
            context_length: 77,
            context_dim: 768,
            norm_groups: 32,
        }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_channels == 0 || self.channel_mult.is_empty() {
            return Err(param_err!("denoiser widths must be positive"));
        }
        if self.num_res_blocks == 0 {
            return Err(param_err!("num_res_blocks must be positive"));
        }
        for &m in &self.channel_mult {
            if (self.base_channels * m) % self.norm_groups != 0 {
                return Err(param_err!(
                    "width {} not divisible by {} norm groups",
                    self.base_channels * m,
                    self.norm_groups
                ));
            }
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.channel_mult.len()) {
            return Err(param_err!("attention level {l} out of range"));
        }
        Ok(())
    }

    /// Spatial downsampling performed by the UNet; latent sizes must divide it.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// Sinusoidal embedding `[cos(t·f_k), sin(t·f_k)]`, `f_k = 10000^(−k/half)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| a.cos() as f32));
        data.extend(args.iter().map(|a| a.sin() as f32));
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), device)?)
}

fn conv3(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(
        cin,
        cout,
        3,
        Conv2dConfig {
            padding: 1,
            ..Default::default()
        },
        vb,
    )
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, temb: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let skip = if cin != cout {
            Some(conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: group_norm(groups, cin, 1e-5, vb.pp("norm1"))?,
            conv1: conv3(cin, cout, vb.pp("conv1"))?,
            time_proj: linear(temb, cout, vb.pp("time_proj"))?,
            norm2: group_norm(groups, cout, 1e-5, vb.pp("norm2"))?,
            conv2: conv3(cout, cout, vb.pp("conv2"))?,
            skip,
        })
    }

    fn forward(&self, xs: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(xs)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(xs)?,
            None => xs.clone(),
        };
        h + skip
    }
}

/// Single-head cross-attention from image features to the text context.
struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    scale: f64,
}

impl CrossAttention {
    fn new(channels: usize, context_dim: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: group_norm(groups, channels, 1e-5, vb.pp("norm"))?,
            to_q: candle_nn::linear_no_bias(channels, channels, vb.pp("to_q"))?,
            to_k: candle_nn::linear_no_bias(context_dim, channels, vb.pp("to_k"))?,
            to_v: candle_nn::linear_no_bias(context_dim, channels, vb.pp("to_v"))?,
            to_out: linear(channels, channels, vb.pp("to_out"))?,
            scale: 1.0 / (channels as f64).sqrt(),
        })
    }

    /// `xs`: `(B, C, h, w)`; `context`: `(B, L, D)`.
    fn forward(&self, xs: &Tensor, context: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let tokens = self
            .norm
            .forward(xs)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        let attn = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * self.scale)?;
        let attn = candle_nn::ops::softmax_last_dim(&attn)?;
        let out = self.to_out.forward(&attn.matmul(&v)?)?;
        let out = out.transpose(1, 2)?.reshape((b, c, h, w))?;
        xs + out
    }
}

struct Level {
    blocks: Vec<(ResBlock, Option<CrossAttention>)>,
}

impl Level {
    fn forward(&self, xs: &Tensor, temb: &Tensor, ctx: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = xs.clone();
        for (res, attn) in &self.blocks {
            h = res.forward(&h, temb)?;
            if let Some(a) = attn {
                h = a.forward(&h, ctx)?;
            }
        }
        Ok(h)
    }
}

/// Conditional UNet noise predictor trained from scratch at desk scale.
pub struct ConditionalUnet {
    config: DenoiserConfig,
    params: ParamStore,
    device: Device,
    null_context: Tensor,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsamplers: Vec<Conv2d>,
    mid: (ResBlock, CrossAttention, ResBlock),
    up: Vec<Level>,
    upsamplers: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ConditionalUnet {
    pub fn new(config: DenoiserConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(seed);
        let vb = params.var_builder(device);
        let cfg = &config;
        let base = cfg.base_channels;
        let temb = 4 * base;
        let g = cfg.norm_groups;
        let widths: Vec<usize> = cfg.channel_mult.iter().map(|m| m * base).collect();

        let null_context = vb.get_with_hints(
            (cfg.context_length, cfg.context_dim),
            "null_context",
            candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 },
        )?;
        let time_in = linear(base, temb, vb.pp("time_in"))?;
        let time_out = linear(temb, temb, vb.pp("time_out"))?;
        let conv_in = conv3(cfg.in_channels(), base, vb.pp("conv_in"))?;

        let mut down = Vec::new();
        let mut downsamplers = Vec::new();
        let mut skip_widths = Vec::new();
        let mut ch = base;
        for (level, &w) in widths.iter().enumerate() {
            let vbl = vb.pp(format!("down.{level}"));
            let mut blocks = Vec::new();
            for i in 0..cfg.num_res_blocks {
                let res = ResBlock::new(ch, w, temb, g, vbl.pp(format!("res.{i}")))?;
                let attn = if cfg.attention_levels.contains(&level) {
                    Some(CrossAttention::new(w, cfg.context_dim, g, vbl.pp(format!("attn.{i}")))?)
                } else {
                    None
                };
                blocks.push((res, attn));
                ch = w;
            }
            skip_widths.push(ch);
            down.push(Level { blocks });
            if level + 1 < widths.len() {
                downsamplers.push(conv2d(
                    ch,
                    ch,
                    3,
                    Conv2dConfig {
                        padding: 1,
                        stride: 2,
                        ..Default::default()
                    },
                    vb.pp(format!("downsample.{level}")),
                )?);
            }
        }

        let mid = (
            ResBlock::new(ch, ch, temb, g, vb.pp("mid.res0"))?,
            CrossAttention::new(ch, cfg.context_dim, g, vb.pp("mid.attn"))?,
            ResBlock::new(ch, ch, temb, g, vb.pp("mid.res1"))?,
        );

        let mut up = Vec::new();
        let mut upsamplers = Vec::new();
        for (level, &w) in widths.iter().enumerate().rev() {
            let vbl = vb.pp(format!("up.{level}"));
            let mut blocks = Vec::new();
            for i in 0..cfg.num_res_blocks {
                let cin = if i == 0 { ch + skip_widths[level] } else { ch };
                let res = ResBlock::new(cin, w, temb, g, vbl.pp(format!("res.{i}")))?;
                let attn = if cfg.attention_levels.contains(&level) {
                    Some(CrossAttention::new(w, cfg.context_dim, g, vbl.pp(format!("attn.{i}")))?)
                } else {
                    None
                };
                blocks.push((res, attn));
                ch = w;
            }
            up.push(Level { blocks });
            if level > 0 {
                upsamplers.push(conv3(ch, ch, vb.pp(format!("upsample.{level}")))?);
            }
        }
        let norm_out = group_norm(g, ch, 1e-5, vb.pp("norm_out"))?;
        let conv_out = conv3(ch, cfg.latent_channels, vb.pp("conv_out"))?;

        Ok(Self {
            config,
            params,
            device: device.clone(),
            null_context,
            time_in,
            time_out,
            conv_in,
            down,
            downsamplers,
            mid,
            up,
            upsamplers,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn context_batch(&self, ctx: &Tensor, b: usize) -> Result<Tensor> {
        let (l, d) = (self.config.context_length, self.config.context_dim);
        let ctx = match ctx.rank() {
            2 => ctx.unsqueeze(0)?.broadcast_as((b, l, d))?.contiguous()?,
            3 => ctx.clone(),
            _ => return Err(param_err!("text condition must be (L,D) or (B,L,D)")),
        };
        if ctx.dims() != [b, l, d] {
            return Err(param_err!("text condition {:?}, expected ({b}, {l}, {d})", ctx.shape()));
        }
        Ok(ctx)
    }

    fn forward(&self, input: &DenoiserInput) -> Result<Tensor> {
        let xs = input.concat_channels()?;
        let (b, c, h, w) = xs.dims4()?;
        if c != self.config.in_channels() {
            return Err(param_err!(
                "denoiser expects {} input channels (2·{} + 1), got {c}",
                self.config.in_channels(),
                self.config.latent_channels
            ));
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(param_err!("latent size {h}x{w} not divisible by {div}"));
        }
        let ctx = self.context_batch(&input.text_condition, b)?;
        let temb = timestep_embedding(&input.timesteps, self.config.base_channels, &self.device)?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;

        let mut h = self.conv_in.forward(&xs)?;
        let mut skips = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            h = level.forward(&h, &temb, &ctx)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsamplers.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid.0.forward(&h, &temb)?;
        h = self.mid.1.forward(&h, &ctx)?;
        h = self.mid.2.forward(&h, &temb)?;
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = level.forward(&h, &temb, &ctx)?;
            if let Some(us) = self.upsamplers.get(i) {
                let (_, _, hh, ww) = h.dims4()?;
                h = us.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(out)
    }
}

impl NoisePredictor for ConditionalUnet {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn null_text_embedding(&self) -> Result<Tensor> {
        Ok(self.null_context.clone())
    }

    fn predict_noise(&self, input: &DenoiserInput) -> Result<Tensor> {
        self.forward(input)
    }

    fn device(&self) -> Device {
        self.device.clone()
    }
}

/// Reference predictor that ignores its input and returns zeros; the
/// baseline against which a trained model's noise MSE is judged.
pub struct ZeroPredictor {
    pub latent_channels: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    fn null_text_embedding(&self) -> Result<Tensor> {
        Ok(Tensor::zeros((1, 1), DType::F32, &Device::Cpu)?)
    }

    fn predict_noise(&self, input: &DenoiserInput) -> Result<Tensor> {
        input.validate()?;
        Ok(input.noisy_latent.zeros_like()?)
    }
}

/// Exact posterior-mean noise predictor for data distributed elementwise as
/// `N(mean, std²)`: `ε̂ = sqrt(1−ᾱ)(x_t − sqrt(ᾱ)·mean) / (ᾱ·std² + 1 − ᾱ)`.
/// Conditioning inputs are ignored.
pub struct GaussianPredictor {
    pub mean: f64,
    pub std: f64,
    pub latent_channels: usize,
    alpha_bars: Vec<f64>,
}

impl GaussianPredictor {
    pub fn new(mean: f64, std: f64, latent_channels: usize, schedule: &crate::schedule::NoiseSchedule) -> Self {
        Self {
            mean,
            std,
            latent_channels,
            alpha_bars: schedule.alpha_bars().to_vec(),
        }
    }
}

impl NoisePredictor for GaussianPredictor {
    fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    fn null_text_embedding(&self) -> Result<Tensor> {
        Ok(Tensor::zeros((1, 1), DType::F32, &Device::Cpu)?)
    }

    fn predict_noise(&self, input: &DenoiserInput) -> Result<Tensor> {
        let x = &input.noisy_latent;
        let b = x.dim(0)?;
        let per_item = x.elem_count() / b.max(1);
        let mut scale = Vec::with_capacity(b);
        let mut shift = Vec::with_capacity(b);
        for &t in &input.timesteps {
            let ab = *self
                .alpha_bars
                .get(t)
                .ok_or_else(|| param_err!("timestep {t} outside the schedule"))?;
            let denom = ab * self.std * self.std + 1.0 - ab;
            let k = (1.0 - ab).sqrt() / denom;
            scale.extend(std::iter::repeat(k as f32).take(per_item));
            shift.extend(std::iter::repeat((k * ab.sqrt() * self.mean) as f32).take(per_item));
        }
        let scale = Tensor::from_vec(scale, x.shape(), x.device())?;
        let shift = Tensor::from_vec(shift, x.shape(), x.device())?;
        Ok(((x * scale)? - shift)?)
    }
}

/// Mean squared difference between two equally shaped tensors.
pub fn tensor_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(param_err!("mse shape mismatch"));
    }
    Ok((a - b)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

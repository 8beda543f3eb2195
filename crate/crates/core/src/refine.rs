//! Stage-two residual refiner.
//!
//! A plain UNet reads `Ĩ_h ⊕ I_c ⊕ M` (7 channels) at the output resolution
//! and predicts a residual added to `Ĩ_h`. The last convolution starts at
//! zero, so an untrained refiner is the identity.

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, Init, VarBuilder};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Triplet;
use crate::error::{param_err, Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::optim::{Adam, AdamParams};
use crate::pipeline::{harmonize_group, HarmonizationRequest, StageOne};
use crate::sampler::SamplerConfig;
use crate::util::seeded_rng;
use crate::vars::ParamStore;

pub const REFINER_IN_CHANNELS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    /// One width per level; five entries give four down/up stages.
    pub widths: Vec<usize>,
}

impl RefinerConfig {
    pub fn toy() -> Self {
        Self {
            widths: vec![16, 24, 32, 48, 64],
        }
    }

    pub fn full() -> Self {
        Self {
            widths: vec![32, 64, 128, 256, 256],
        }
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(param_err!(
                "refiner needs at least two positive widths, got {:?}",
                self.widths
            ));
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

struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    fn new(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            a: conv(cin, cout, 1, vb.pp("a"))?,
            b: conv(cout, cout, 1, vb.pp("b"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.b.forward(&self.a.forward(x)?.silu()?)?.silu()
    }
}

pub struct Refiner {
    config: RefinerConfig,
    params: ParamStore,
    device: Device,
    input: Block,
    downs: Vec<(Conv2d, Block)>,
    ups: Vec<(Conv2d, Block)>,
    out: Conv2d,
}

/// Inputs for a batch at a common resolution.
pub struct RefinerInput {
    /// `(B, 3, H, W)`
    pub harmonized: Tensor,
    /// `(B, 3, H, W)`
    pub composite: Tensor,
    /// `(B, 1, H, W)`
    pub mask: Tensor,
}

impl RefinerInput {
    pub fn from_images(
        harmonized: &[&RgbImage],
        composite: &[&RgbImage],
        mask: &[&Mask],
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            harmonized: RgbImage::stack(harmonized, device)?,
            composite: RgbImage::stack(composite, device)?,
            mask: Mask::stack(mask, device)?,
        })
    }

    pub fn concat(&self) -> Result<Tensor> {
        let (b, _, h, w) = self.harmonized.dims4()?;
        for (name, t, c) in [("composite", &self.composite, 3), ("mask", &self.mask, 1)] {
            if t.dims4()? != (b, c, h, w) {
                return Err(param_err!(
                    "refiner {name} has shape {:?}, expected ({b}, {c}, {h}, {w})",
                    t.shape()
                ));
            }
        }
        let x = Tensor::cat(&[&self.harmonized, &self.composite, &self.mask], 1)?;
        debug_assert_eq!(x.dim(1)?, REFINER_IN_CHANNELS);
        Ok(x)
    }
}

impl Refiner {
    pub fn new(config: RefinerConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(seed);
        let vb = params.var_builder(device);
        let w = &config.widths;
        let input = Block::new(REFINER_IN_CHANNELS, w[0], vb.pp("input"))?;
        let mut downs = Vec::new();
        for i in 1..w.len() {
            let v = vb.pp(format!("down.{i}"));
            downs.push((
                conv(w[i - 1], w[i], 2, v.pp("pool"))?,
                Block::new(w[i], w[i], v.pp("block"))?,
            ));
        }
        let mut ups = Vec::new();
        for i in (1..w.len()).rev() {
            let v = vb.pp(format!("up.{i}"));
            ups.push((
                conv(w[i], w[i - 1], 1, v.pp("proj"))?,
                Block::new(2 * w[i - 1], w[i - 1], v.pp("block"))?,
            ));
        }
        let out_vb = vb.pp("out");
        let out = Conv2d::new(
            out_vb.get_with_hints((3, w[0], 3, 3), "weight", Init::Const(0.0))?,
            Some(out_vb.get_with_hints(3, "bias", Init::Const(0.0))?),
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
        );
        Ok(Self {
            config,
            params,
            device: device.clone(),
            input,
            downs,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Raw network output for a batch.
    pub fn residual(&self, input: &RefinerInput) -> Result<Tensor> {
        let x = input.concat()?;
        let (_, _, h, w) = x.dims4()?;
        let d = self.config.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(param_err!("refiner input {h}x{w} is not divisible by {d}"));
        }
        let mut h = self.input.forward(&x)?;
        let mut skips = vec![h.clone()];
        for (pool, block) in &self.downs {
            h = block.forward(&pool.forward(&h)?.silu()?)?;
            skips.push(h.clone());
        }
        skips.pop();
        for (proj, block) in &self.ups {
            let (_, _, hh, ww) = h.dims4()?;
            h = proj.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?.silu()?;
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?)?;
        }
        Ok(self.out.forward(&h)?)
    }

    /// `Ĩ_h + residual` before clamping.
    fn forward_unclamped(&self, input: &RefinerInput) -> Result<Tensor> {
        Ok((&input.harmonized + self.residual(input)?)?)
    }

    /// `clamp(Ĩ_h + residual, −1, 1)` for a batch.
    pub fn forward(&self, input: &RefinerInput) -> Result<Tensor> {
        Ok(self.forward_unclamped(input)?.clamp(-1f32, 1f32)?)
    }

    pub fn refine(&self, harmonized: &RgbImage, composite: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        if harmonized.dims() != composite.dims() || harmonized.dims() != mask.dims() {
            return Err(param_err!(
                "refiner inputs differ in size: {:?}, {:?}, {:?}",
                harmonized.dims(),
                composite.dims(),
                mask.dims()
            ));
        }
        let input = RefinerInput::from_images(&[harmonized], &[composite], &[mask], &self.device)?;
        RgbImage::from_tensor(&self.forward(&input)?.squeeze(0)?)
    }
}

/// One refiner training example at the output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineTuple {
    pub id: String,
    pub seed: u64,
    pub harmonized: RgbImage,
    pub composite: RgbImage,
    pub mask: Mask,
    pub real: RgbImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TupleConfig {
    pub inference_resolution: usize,
    pub output_resolution: usize,
    /// Stage-one samples per training triplet, each with its own seed.
    pub variants: usize,
    pub base_seed: u64,
    pub sampler: SamplerConfig,
    pub blend_background: bool,
    pub micro_batch: usize,
}

/// Runs stage one over `triplets` `variants` times. Variant `v` of item `i`
/// uses seed `base_seed + v·len + i`.
pub fn generate_refine_tuples(
    triplets: &[(String, Triplet)],
    models: StageOne,
    config: &TupleConfig,
) -> Result<Vec<RefineTuple>> {
    if triplets.is_empty() || config.variants == 0 {
        return Err(param_err!("refine tuples need samples and at least one variant"));
    }
    let o = config.output_resolution;
    let requests: Vec<HarmonizationRequest> = triplets
        .iter()
        .map(|(id, t)| HarmonizationRequest {
            inference_resolution: config.inference_resolution,
            output_resolution: o,
            sampler: config.sampler,
            blend_background: config.blend_background,
            ..HarmonizationRequest::new(id.clone(), t.composite.clone(), t.mask.clone())
        })
        .collect();
    let n = triplets.len() as u64;
    let mut out = Vec::with_capacity(triplets.len() * config.variants);
    for v in 0..config.variants as u64 {
        for (start, chunk) in requests
            .chunks(config.micro_batch.max(1))
            .enumerate()
            .map(|(k, c)| (k * config.micro_batch.max(1), c))
        {
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|k| config.base_seed.wrapping_add(v * n + (start + k) as u64))
                .collect();
            let refs: Vec<&HarmonizationRequest> = chunk.iter().collect();
            let results = harmonize_group(&refs, &seeds, models)?;
            for (k, h) in results.into_iter().enumerate() {
                let (id, t) = &triplets[start + k];
                out.push(RefineTuple {
                    id: id.clone(),
                    seed: seeds[k],
                    harmonized: h.output,
                    composite: t.composite.resize_square(o),
                    mask: t.mask.resize_nearest(o, o),
                    real: t.real.resize_square(o),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TupleRecord {
    id: String,
    seed: u64,
    stem: String,
}

/// Writes tuples as PNGs plus `tuples.json`. PNG storage quantizes to 8 bits.
pub fn save_tuples(tuples: &[RefineTuple], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(tuples.len());
    for (i, t) in tuples.iter().enumerate() {
        let stem = format!("{i:06}");
        t.harmonized.save_png(dir.join(format!("{stem}_harmonized.png")))?;
        t.composite.save_png(dir.join(format!("{stem}_composite.png")))?;
        t.mask.save_png(dir.join(format!("{stem}_mask.png")))?;
        t.real.save_png(dir.join(format!("{stem}_real.png")))?;
        records.push(TupleRecord {
            id: t.id.clone(),
            seed: t.seed,
            stem,
        });
    }
    std::fs::write(dir.join("tuples.json"), serde_json::to_vec_pretty(&records)?)?;
    Ok(())
}

pub fn load_tuples(dir: impl AsRef<Path>) -> Result<Vec<RefineTuple>> {
    let dir = dir.as_ref();
    let records: Vec<TupleRecord> = serde_json::from_slice(&std::fs::read(dir.join("tuples.json"))?)?;
    records
        .into_iter()
        .map(|r| {
            Ok(RefineTuple {
                harmonized: RgbImage::load(dir.join(format!("{}_harmonized.png", r.stem)))?,
                composite: RgbImage::load(dir.join(format!("{}_composite.png", r.stem)))?,
                mask: Mask::load(dir.join(format!("{}_mask.png", r.stem)))?,
                real: RgbImage::load(dir.join(format!("{}_real.png", r.stem)))?,
                id: r.id,
                seed: r.seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Square random-crop size; `0` trains on whole tuples.
    pub crop_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            crop_size: 0,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn crop_tuple<R: Rng>(t: &RefineTuple, size: usize, rng: &mut R) -> Result<RefineTuple> {
    let (h, w) = t.mask.dims();
    if h < size || w < size {
        return Err(param_err!("tuple {} is {w}x{h}, smaller than crop {size}", t.id));
    }
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    Ok(RefineTuple {
        id: t.id.clone(),
        seed: t.seed,
        harmonized: t.harmonized.crop(x0, y0, size, size)?,
        composite: t.composite.crop(x0, y0, size, size)?,
        mask: t.mask.crop(x0, y0, size, size)?,
        real: t.real.crop(x0, y0, size, size)?,
    })
}

fn refine_batch_loss(refiner: &Refiner, batch: &[&RefineTuple]) -> Result<Tensor> {
    let dev = refiner.device().clone();
    let h: Vec<&RgbImage> = batch.iter().map(|t| &t.harmonized).collect();
    let c: Vec<&RgbImage> = batch.iter().map(|t| &t.composite).collect();
    let m: Vec<&Mask> = batch.iter().map(|t| &t.mask).collect();
    let g: Vec<&RgbImage> = batch.iter().map(|t| &t.real).collect();
    let input = RefinerInput::from_images(&h, &c, &m, &dev)?;
    let gt = RgbImage::stack(&g, &dev)?;
    Ok((refiner.forward_unclamped(&input)? - gt)?.sqr()?.mean_all()?)
}

/// Trains a fresh refiner with pixel MSE against the ground truth.
pub fn train_refiner(
    tuples: &[RefineTuple],
    config: &RefinerConfig,
    train: &RefinerTrainConfig,
    device: &Device,
) -> Result<(Refiner, Vec<f32>)> {
    if tuples.is_empty() {
        return Err(param_err!("refiner training set is empty"));
    }
    if train.crop_size % config.spatial_divisor() != 0 {
        return Err(param_err!(
            "refiner crop {} is not divisible by {}",
            train.crop_size,
            config.spatial_divisor()
        ));
    }
    let refiner = Refiner::new(config.clone(), train.seed, device)?;
    let mut opt = Adam::new(
        refiner.params().vars(),
        AdamParams {
            lr: train.lr,
            ..Default::default()
        },
    )?;
    let mut rng = seeded_rng(train.seed ^ 0x7e41_4e00);
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&tuples[order[cursor]]);
            cursor += 1;
        }
        let loss = if train.crop_size > 0 {
            let crops = batch
                .iter()
                .map(|t| crop_tuple(t, train.crop_size, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            refine_batch_loss(&refiner, &crops.iter().collect::<Vec<_>>())?
        } else {
            refine_batch_loss(&refiner, &batch)?
        };
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|t| t.id.as_str()).collect();
            return Err(Error::Training(format!(
                "refiner loss is {value} at step {step} (lr {}, batch {ids:?})",
                opt.learning_rate()
            )));
        }
        opt.backward_step(&loss)?;
        losses.push(value);
    }
    Ok((refiner, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::randn;
    use rand::Rng;

    fn random_image(rng: &mut impl Rng, size: usize) -> RgbImage {
        let data = (0..3 * size * size).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        RgbImage::new(size, size, data).unwrap()
    }

    #[test]
    fn fresh_refiner_is_identity() {
        let r = Refiner::new(RefinerConfig::toy(), 0, &Device::Cpu).unwrap();
        let mut rng = seeded_rng(1);
        for _ in 0..3 {
            let h = random_image(&mut rng, 32);
            let c = random_image(&mut rng, 32);
            let m = Mask::from_fn(32, 32, |x, y| (x + y) % 3 == 0);
            let out = r.refine(&h, &c, &m).unwrap();
            assert_eq!(out, h);
        }
    }

    #[test]
    fn residual_formulation_and_channel_contract() {
        let r = Refiner::new(RefinerConfig::toy(), 0, &Device::Cpu).unwrap();
        let mut rng = seeded_rng(2);
        let w = r
            .params()
            .vars()
            .into_iter()
            .find(|(n, _)| n == "out.weight")
            .unwrap()
            .1;
        w.set(&(randn(&mut rng, w.shape(), &Device::Cpu).unwrap() * 0.01).unwrap())
            .unwrap();
        let h = (randn(&mut rng, (1, 3, 16, 16), &Device::Cpu).unwrap() * 0.1).unwrap();
        let input = RefinerInput {
            harmonized: h.clone(),
            composite: h.clone(),
            mask: h.narrow(1, 0, 1).unwrap().zeros_like().unwrap(),
        };
        let res = r.residual(&input).unwrap();
        let out = r.forward(&input).unwrap();
        let d = ((out - h).unwrap() - res).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-6);
        let bad = RefinerInput {
            mask: input.composite.clone(),
            ..input
        };
        assert!(matches!(r.residual(&bad), Err(Error::Param(_))));
    }

    #[test]
    fn perfect_targets_keep_residual_small() {
        let mut rng = seeded_rng(3);
        let tuples: Vec<RefineTuple> = (0..4)
            .map(|i| {
                let h = random_image(&mut rng, 16);
                RefineTuple {
                    id: i.to_string(),
                    seed: 0,
                    composite: random_image(&mut rng, 16),
                    mask: Mask::ones(16, 16),
                    real: h.clone(),
                    harmonized: h,
                }
            })
            .collect();
        let train = RefinerTrainConfig {
            steps: 30,
            batch_size: 2,
            crop_size: 0,
            lr: 1e-3,
            seed: 0,
        };
        let (r, losses) = train_refiner(&tuples, &RefinerConfig::toy(), &train, &Device::Cpu).unwrap();
        assert_eq!(losses[0], 0.0);
        assert!(losses.iter().all(|&l| l < 1e-6));
        let t = &tuples[0];
        let out = r.refine(&t.harmonized, &t.composite, &t.mask).unwrap();
        assert!(crate::metrics::mse(&out, &t.harmonized).unwrap() < 1e-2);
        assert!(train_refiner(&[], &RefinerConfig::toy(), &train, &Device::Cpu).is_err());
    }

    #[test]
    fn training_is_deterministic_and_learns_a_shift() {
        let mut rng = seeded_rng(4);
        let tuples: Vec<RefineTuple> = (0..6)
            .map(|i| {
                let real = random_image(&mut rng, 16);
                let mut h = real.clone();
                h.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (*v * 0.8 + 0.1).clamp(-1.0, 1.0));
                RefineTuple {
                    id: i.to_string(),
                    seed: 0,
                    composite: h.clone(),
                    mask: Mask::ones(16, 16),
                    real,
                    harmonized: h,
                }
            })
            .collect();
        let train = RefinerTrainConfig {
            steps: 60,
            batch_size: 3,
            crop_size: 0,
            lr: 2e-3,
            seed: 5,
        };
        let (_, a) = train_refiner(&tuples, &RefinerConfig::toy(), &train, &Device::Cpu).unwrap();
        let (_, b) = train_refiner(&tuples, &RefinerConfig::toy(), &train, &Device::Cpu).unwrap();
        assert_eq!(a, b);
        assert!(a[55..].iter().sum::<f32>() < a[..5].iter().sum::<f32>());
    }

    #[test]
    fn tuples_round_trip_through_disk() {
        let mut rng = seeded_rng(5);
        let t = RefineTuple {
            id: "x_1_1".into(),
            seed: 9,
            harmonized: RgbImage::from_rgb8(&random_image(&mut rng, 8).to_rgb8()),
            composite: RgbImage::from_rgb8(&random_image(&mut rng, 8).to_rgb8()),
            mask: Mask::from_fn(8, 8, |x, _| x < 3),
            real: RgbImage::from_rgb8(&random_image(&mut rng, 8).to_rgb8()),
        };
        let dir = tempfile::tempdir().unwrap();
        save_tuples(std::slice::from_ref(&t), dir.path()).unwrap();
        assert_eq!(load_tuples(dir.path()).unwrap(), vec![t]);
    }
}

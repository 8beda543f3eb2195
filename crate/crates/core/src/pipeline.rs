//! Stage-one harmonization: encode, sample, decode, blend, downscale.

use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::NoisePredictor;
use crate::error::{param_err, Result};
use crate::imaging::{Mask, RgbImage};
use crate::sampler::{sample_per_item, Conditioning, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Codec, noise predictor and schedule used together for inference.
#[derive(Clone, Copy)]
pub struct StageOne<'a> {
    pub codec: &'a dyn LatentCodec,
    pub denoiser: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone)]
pub struct HarmonizationRequest {
    /// Label carried into the batch manifest, typically the input path.
    pub id: String,
    pub composite: RgbImage,
    pub mask: Mask,
    pub inference_resolution: usize,
    pub output_resolution: usize,
    pub sampler: SamplerConfig,
    pub blend_background: bool,
}

impl HarmonizationRequest {
    pub fn new(id: impl Into<String>, composite: RgbImage, mask: Mask) -> Self {
        Self {
            id: id.into(),
            composite,
            mask,
            inference_resolution: 1024,
            output_resolution: 256,
            sampler: SamplerConfig::default(),
            blend_background: true,
        }
    }

    pub fn validate(&self, downsample_factor: usize) -> Result<()> {
        crate::imaging::check_same_size(&self.composite, &self.mask)?;
        if self.inference_resolution == 0 || self.inference_resolution % downsample_factor != 0 {
            return Err(param_err!(
                "inference resolution {} is not a positive multiple of {downsample_factor}",
                self.inference_resolution
            ));
        }
        if self.output_resolution == 0 {
            return Err(param_err!("output resolution must be positive"));
        }
        Ok(())
    }
}

/// Intermediate and final images of one request.
#[derive(Debug, Clone)]
pub struct Harmonized {
    /// Composite resized to the inference resolution.
    pub composite_inference: RgbImage,
    pub mask_inference: Mask,
    /// Decoded sample at the inference resolution, blended if requested.
    pub harmonized_inference: RgbImage,
    /// `Ĩ_h` at the output resolution.
    pub output: RgbImage,
}

/// Runs one request. Deterministic given `request.sampler.seed`.
pub fn harmonize(request: &HarmonizationRequest, models: StageOne) -> Result<RgbImage> {
    Ok(harmonize_full(request, models)?.output)
}

pub fn harmonize_full(request: &HarmonizationRequest, models: StageOne) -> Result<Harmonized> {
    let mut out = harmonize_group(&[request], &[request.sampler.seed], models)?;
    Ok(out.remove(0))
}

/// Harmonizes requests sharing inference resolution and sampler settings in
/// one batch; item `i` uses the RNG stream of `seeds[i]`.
pub fn harmonize_group(requests: &[&HarmonizationRequest], seeds: &[u64], models: StageOne) -> Result<Vec<Harmonized>> {
    let first = *requests.first().ok_or_else(|| param_err!("no requests to harmonize"))?;
    if seeds.len() != requests.len() {
        return Err(param_err!("{} seeds for {} requests", seeds.len(), requests.len()));
    }
    let f = models.codec.downsample_factor();
    let res = first.inference_resolution;
    for r in requests {
        r.validate(f)?;
        if r.inference_resolution != res
            || r.sampler.num_inference_steps != first.sampler.num_inference_steps
            || r.sampler.guidance_scale != first.sampler.guidance_scale
        {
            return Err(param_err!(
                "grouped requests must share inference resolution and sampler settings"
            ));
        }
    }
    let device: Device = models.codec.device();
    let composites: Vec<RgbImage> = requests.iter().map(|r| r.composite.resize_square(res)).collect();
    let masks: Vec<Mask> = requests.iter().map(|r| r.mask.resize_nearest(res, res)).collect();
    let lat = res / f;
    let x = RgbImage::stack(&composites.iter().collect::<Vec<_>>(), &device)?;
    let composite_latent = models.codec.encode(&x, None)?.detach();
    let low: Vec<Mask> = masks.iter().map(|m| m.resize_nearest(lat, lat)).collect();
    let mask_lowres = Mask::stack(&low.iter().collect::<Vec<_>>(), &device)?;
    let cond = Conditioning {
        mask_lowres,
        composite_latent,
        text: models.denoiser.null_text_embedding()?,
    };
    let z = sample_per_item(models.denoiser, &cond, &first.sampler, models.schedule, seeds)?;
    let decoded = RgbImage::unstack(&models.codec.decode(&z)?.detach())?;
    let mut out = Vec::with_capacity(requests.len());
    for (((r, img), comp), mask) in requests.iter().zip(decoded).zip(composites).zip(masks) {
        let harmonized_inference = if r.blend_background {
            RgbImage::blend(&img, &comp, &mask)?
        } else {
            img
        };
        let mut output = harmonized_inference.resize_square(r.output_resolution);
        if r.blend_background {
            // Background at the output size is the composite resized once,
            // not twice.
            let o = r.output_resolution;
            output = RgbImage::blend(&output, &r.composite.resize_square(o), &r.mask.resize_nearest(o, o))?;
        }
        out.push(Harmonized {
            composite_inference: comp,
            mask_inference: mask,
            harmonized_inference,
            output,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub base_seed: u64,
    /// Worker threads.
    pub parallelism: usize,
    /// Requests per network batch. Grouping depends only on request order,
    /// so results do not depend on `parallelism`.
    pub micro_batch: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            base_seed: 0,
            parallelism: 1,
            micro_batch: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub input: String,
    pub seed: u64,
    pub inference_resolution: usize,
    pub output_resolution: usize,
    pub output: Option<String>,
    pub error: Option<String>,
    pub millis: u128,
}

/// Order-preserving batch run with per-item seeds `base_seed + index`.
/// A failing micro-batch is recorded in the manifest and the rest proceed.
pub fn harmonize_batch(
    requests: &[HarmonizationRequest],
    models: StageOne,
    options: &BatchOptions,
) -> Result<(Vec<Option<RgbImage>>, Vec<ManifestRecord>)> {
    if requests.is_empty() {
        return Err(param_err!("empty request list"));
    }
    let mb = options.micro_batch.max(1);
    let chunks: Vec<(usize, &[HarmonizationRequest])> =
        requests.chunks(mb).enumerate().map(|(i, c)| (i * mb, c)).collect();
    let workers = options.parallelism.clamp(1, chunks.len());
    let run_chunk = |start: usize, chunk: &[HarmonizationRequest]| {
        let t = Instant::now();
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|k| options.base_seed.wrapping_add((start + k) as u64))
            .collect();
        let refs: Vec<&HarmonizationRequest> = chunk.iter().collect();
        let result = harmonize_group(&refs, &seeds, models);
        (result, t.elapsed().as_millis())
    };
    let mut results: Vec<Option<(Result<Vec<Harmonized>>, u128)>> = (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        for (i, (start, chunk)) in chunks.iter().enumerate() {
            results[i] = Some(run_chunk(*start, chunk));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let collected = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some((start, chunk)) = chunks.get(i) else { break };
                    let r = run_chunk(*start, chunk);
                    collected.lock().unwrap().push((i, r));
                });
            }
        });
        for (i, r) in collected.into_inner().unwrap() {
            results[i] = Some(r);
        }
    }
    let mut images = Vec::with_capacity(requests.len());
    let mut manifest = Vec::with_capacity(requests.len());
    for ((start, chunk), res) in chunks.iter().zip(results) {
        let (res, millis) = res.expect("every chunk ran");
        let (outs, err) = match res {
            Ok(v) => (v.into_iter().map(|h| Some(h.output)).collect(), None),
            Err(e) => (vec![None; chunk.len()], Some(e.to_string())),
        };
        for (k, (req, out)) in chunk.iter().zip(outs).enumerate() {
            manifest.push(ManifestRecord {
                index: start + k,
                input: req.id.clone(),
                seed: options.base_seed.wrapping_add((start + k) as u64),
                inference_resolution: req.inference_resolution,
                output_resolution: req.output_resolution,
                output: None,
                error: err.clone(),
                millis,
            });
            images.push(out);
        }
    }
    Ok((images, manifest))
}

/// Stacks latents of `images` at `resolution` with the deterministic encoder.
pub fn encode_images(codec: &dyn LatentCodec, images: &[&RgbImage], resolution: usize) -> Result<Tensor> {
    let resized: Vec<RgbImage> = images.iter().map(|i| i.resize_square(resolution)).collect();
    let x = RgbImage::stack(&resized.iter().collect::<Vec<_>>(), &codec.device())?;
    codec.encode(&x, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, KlAutoencoder};
    use crate::denoiser::{ConditionalUnet, DenoiserConfig};
    use crate::metrics;

    struct Models {
        codec: KlAutoencoder,
        unet: ConditionalUnet,
        schedule: NoiseSchedule,
    }

    impl Models {
        fn new() -> Self {
            Self {
                codec: KlAutoencoder::new(CodecConfig::toy(), 1, &Device::Cpu).unwrap(),
                unet: ConditionalUnet::new(DenoiserConfig::toy(), 2, &Device::Cpu).unwrap(),
                schedule: NoiseSchedule::default(),
            }
        }

        fn stage_one(&self) -> StageOne<'_> {
            StageOne {
                codec: &self.codec,
                denoiser: &self.unet,
                schedule: &self.schedule,
            }
        }
    }

    fn request(mask: Mask) -> HarmonizationRequest {
        let mut img = RgbImage::filled(40, 40, [0.1, -0.3, 0.5]);
        for y in 0..40 {
            for x in 0..40 {
                img.set(0, y, x, (x as f32 / 20.0) - 1.0);
            }
        }
        HarmonizationRequest {
            inference_resolution: 32,
            output_resolution: 24,
            ..HarmonizationRequest::new("a", img, mask)
        }
    }

    #[test]
    fn empty_mask_returns_resized_composite() {
        let m = Models::new();
        let req = request(Mask::zeros(40, 40));
        let out = harmonize(&req, m.stage_one()).unwrap();
        assert_eq!(out, req.composite.resize_square(24));
    }

    #[test]
    fn background_is_preserved_and_output_sized() {
        let m = Models::new();
        let req = request(Mask::from_fn(40, 40, |x, _| x < 20));
        let h = harmonize_full(&req, m.stage_one()).unwrap();
        assert_eq!(h.output.dims(), (24, 24));
        let n = 32 * 32;
        for c in 0..3 {
            for i in 0..n {
                if h.mask_inference.data()[i] == 0 {
                    assert_eq!(
                        h.harmonized_inference.data()[c * n + i].to_bits(),
                        h.composite_inference.data()[c * n + i].to_bits()
                    );
                }
            }
        }
        let mse = metrics::mse(&h.harmonized_inference, &h.composite_inference).unwrap();
        let fmse = metrics::fmse(&h.harmonized_inference, &h.composite_inference, &h.mask_inference).unwrap();
        let ratio = crate::dataset::foreground_ratio(&h.mask_inference).unwrap();
        assert!((mse - fmse * ratio).abs() <= 1e-9 * mse.max(1e-300));
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let m = Models::new();
        let req = request(Mask::from_fn(40, 40, |x, y| x > 10 && y > 10));
        let a = harmonize(&req, m.stage_one()).unwrap();
        let b = harmonize(&req, m.stage_one()).unwrap();
        assert_eq!(a, b);
        let mut other = req.clone();
        other.sampler.seed = 1;
        other.blend_background = false;
        let mut same = req.clone();
        same.blend_background = false;
        assert_ne!(
            harmonize(&other, m.stage_one()).unwrap(),
            harmonize(&same, m.stage_one()).unwrap()
        );
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let m = Models::new();
        let mut req = request(Mask::zeros(40, 40));
        req.inference_resolution = 30;
        assert!(harmonize(&req, m.stage_one()).is_err());
        let req = HarmonizationRequest {
            mask: Mask::zeros(20, 40),
            ..request(Mask::zeros(40, 40))
        };
        assert!(harmonize(&req, m.stage_one()).is_err());
    }

    #[test]
    fn batch_is_order_preserving_and_parallelism_independent() {
        let m = Models::new();
        let reqs: Vec<HarmonizationRequest> = (0..5)
            .map(|i| {
                let mut r = request(Mask::from_fn(40, 40, |x, _| x > 5 * i));
                r.id = format!("r{i}");
                r
            })
            .collect();
        let opts = BatchOptions {
            base_seed: 10,
            parallelism: 1,
            micro_batch: 2,
        };
        let (a, ma) = harmonize_batch(&reqs, m.stage_one(), &opts).unwrap();
        let (b, mb) = harmonize_batch(&reqs, m.stage_one(), &BatchOptions { parallelism: 3, ..opts }).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            ma.iter()
                .map(|r| (r.index, r.seed, r.input.clone()))
                .collect::<Vec<_>>(),
            mb.iter()
                .map(|r| (r.index, r.seed, r.input.clone()))
                .collect::<Vec<_>>()
        );
        assert_eq!(ma[4].seed, 14);
        assert_eq!(ma[3].input, "r3");
        assert!(harmonize_batch(&[], m.stage_one(), &opts).is_err());
    }

    #[test]
    fn batch_records_failures_and_continues() {
        let m = Models::new();
        let good = request(Mask::zeros(40, 40));
        let mut bad = good.clone();
        bad.inference_resolution = 30;
        let (imgs, man) = harmonize_batch(&[bad, good], m.stage_one(), &BatchOptions::default()).unwrap();
        assert!(imgs[0].is_none() && man[0].error.is_some());
        assert!(imgs[1].is_some() && man[1].error.is_none());
    }
}

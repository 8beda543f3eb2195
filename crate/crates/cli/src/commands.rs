use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use harmony_core::checkpoint::{load_codec, load_denoiser, load_refiner, save_codec, save_denoiser, save_refiner};
use harmony_core::codec::{train_codec as fit_codec, KlAutoencoder};
use harmony_core::dataset::{load_iharmony4, HarmonySample, SplitManifest, Triplet};
use harmony_core::denoiser::ConditionalUnet;
use harmony_core::imaging::{Mask, RgbImage};
use harmony_core::metrics::{aggregate, write_records, EvalRecord, EvalReport};
use harmony_core::pipeline::{harmonize_batch, BatchOptions, HarmonizationRequest, ManifestRecord, StageOne};
use harmony_core::refine::{generate_refine_tuples, load_tuples, save_tuples, train_refiner, Refiner, TupleConfig};
use harmony_core::schedule::NoiseSchedule;
use harmony_core::synth::SyntheticSplit;
use harmony_core::training::{lr_schedule, DiffusionTrainer, LatentDataset};

use crate::config::RunConfig;
use crate::CliError;

const LOAD_CHUNK: usize = 64;

fn device() -> Device {
    Device::Cpu
}

fn require(path: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf, CliError> {
    match path {
        Some(p) if p.is_file() => Ok(p.clone()),
        Some(p) => Err(CliError::Usage(format!(
            "{what} checkpoint {} does not exist",
            p.display()
        ))),
        None => Err(CliError::Usage(format!(
            "no {what} checkpoint: pass {flag} or set paths.{what}"
        ))),
    }
}

fn load_split(cfg: &RunConfig, dataset: Option<&Path>) -> Result<SplitManifest, CliError> {
    let root = cfg.dataset_root(dataset)?;
    let manifest = load_iharmony4(&root)?;
    log::info!(
        "dataset {}: {} train, {} test",
        root.display(),
        manifest.train.len(),
        manifest.test.len()
    );
    Ok(manifest)
}

fn load_samples(samples: &[HarmonySample], size: Option<usize>) -> Result<Vec<(String, Triplet)>, CliError> {
    samples
        .iter()
        .map(|s| {
            let t = s.load()?;
            Ok((s.id.clone(), size.map_or(t.clone(), |n| t.resize(n))))
        })
        .collect()
}

/// Append-only `step<TAB>loss<TAB>lr` log; the header is written once.
struct LossLog(std::fs::File);

impl LossLog {
    fn open(path: &Path) -> Result<Self, CliError> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "step\tloss\tlr")?;
        }
        Ok(Self(f))
    }

    fn record(&mut self, step: u64, loss: f32, lr: f64) -> Result<(), CliError> {
        writeln!(self.0, "{step}\t{loss}\t{lr}")?;
        Ok(())
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let split = SyntheticSplit::generate(&cfg.synth.generator)?;
    let manifest = split.write_layout(out, cfg.synth.image_size)?;
    cfg.echo(out)?;
    println!(
        "wrote {} train and {} test composites to {}",
        manifest.train.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}

pub fn train_codec(cfg: &RunConfig, dataset: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let split = load_split(cfg, dataset)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut images = Vec::new();
    for s in &split.train {
        if seen.insert(s.real_path.clone()) {
            images.push(RgbImage::load(&s.real_path)?.resize_square(cfg.train.train_resolution));
        }
    }
    cfg.echo(out)?;
    let (codec, report) = fit_codec(&images, &cfg.codec, &cfg.codec_train, &device())?;
    let mut log = LossLog::open(&out.join("loss.tsv"))?;
    for (i, l) in report.losses.iter().enumerate() {
        log.record(i as u64 + 1, *l, cfg.codec_train.lr)?;
    }
    save_codec(&codec, out.join("codec.safetensors"))?;
    println!(
        "codec trained on {} images; scaling factor {:.5}",
        images.len(),
        report.scaling_factor
    );
    Ok(())
}

fn encode_training_set(
    cfg: &RunConfig,
    codec: &KlAutoencoder,
    samples: &[HarmonySample],
) -> Result<LatentDataset, CliError> {
    let res = cfg.train.train_resolution;
    let mut parts = Vec::new();
    for (k, chunk) in samples.chunks(LOAD_CHUNK).enumerate() {
        let triplets = load_samples(chunk, None)?;
        parts.push(if cfg.train_run.augment_views == 0 {
            LatentDataset::encode(codec, &triplets, res)?
        } else {
            LatentDataset::encode_augmented(
                codec,
                &triplets,
                res,
                cfg.train_run.augment_views,
                &cfg.train_run.augment,
                cfg.train.seed.wrapping_add(k as u64),
            )?
        });
    }
    Ok(LatentDataset::concat(parts)?)
}

pub fn train_harmony(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let split = load_split(cfg, dataset)?;
    let codec = load_codec(require(&cfg.paths.codec, "codec", "--codec")?, &device())?;
    let schedule = cfg.schedule.build()?;
    let mut trainer = match resume {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!(
                    "resume checkpoint {} does not exist",
                    p.display()
                )));
            }
            let mut t = DiffusionTrainer::resume(p, &device(), schedule)?;
            t.config.phase1_steps = cfg.train.phase1_steps;
            t.config.phase2_steps = cfg.train.phase2_steps;
            log::info!("resuming at step {}", t.step());
            t
        }
        None => {
            let unet = ConditionalUnet::new(cfg.denoiser.clone(), cfg.train.seed, &device())?;
            DiffusionTrainer::new(unet, cfg.train.clone(), schedule)?
        }
    };
    let data = encode_training_set(cfg, &codec, &split.train)?;
    cfg.echo(out)?;
    let state = out.join("train_state.safetensors");
    let mut log = LossLog::open(&out.join("loss.tsv"))?;
    let total = trainer.config.total_steps();
    while trainer.step() < total {
        let lr = lr_schedule(trainer.step(), &trainer.config);
        let loss = trainer.train_step_sampled(&data)?;
        let step = trainer.step();
        log.record(step, loss, lr)?;
        if step % 100 == 0 {
            log::info!("step {step}/{total}: loss {loss:.5}");
        }
        let every = cfg.train_run.checkpoint_every;
        if every > 0 && step % every == 0 && step < total {
            trainer.save(&state)?;
        }
    }
    trainer.save(&state)?;
    save_denoiser(&trainer.ema_model()?, trainer.step(), out.join("denoiser.safetensors"))?;
    println!("stage one trained to step {}", trainer.step());
    Ok(())
}

pub fn train_refine(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    out: &Path,
    tuples_dir: Option<&Path>,
) -> Result<(), CliError> {
    let codec_path = require(&cfg.paths.codec, "codec", "--codec")?;
    let denoiser_path = require(&cfg.paths.denoiser, "denoiser", "--denoiser")?;
    let dir = tuples_dir.map_or_else(|| out.join("tuples"), Path::to_path_buf);
    let split = if dir.join("tuples.json").is_file() {
        None
    } else {
        Some(load_split(cfg, dataset)?)
    };
    cfg.echo(out)?;
    if let Some(split) = split {
        let codec = load_codec(&codec_path, &device())?;
        let denoiser = load_denoiser(&denoiser_path, &device())?;
        let schedule = cfg.schedule.build()?;
        let models = StageOne {
            codec: &codec,
            denoiser: &denoiser,
            schedule: &schedule,
        };
        let tc = TupleConfig {
            inference_resolution: cfg.tuples.inference_resolution,
            output_resolution: cfg.tuples.output_resolution,
            variants: cfg.tuples.variants,
            base_seed: cfg.tuples.base_seed,
            sampler: cfg.inference.sampler,
            blend_background: cfg.inference.blend_background,
            micro_batch: cfg.inference.micro_batch,
        };
        let triplets = load_samples(&split.train, None)?;
        let tuples = generate_refine_tuples(&triplets, models, &tc)?;
        save_tuples(&tuples, &dir)?;
        log::info!("generated {} refinement tuples in {}", tuples.len(), dir.display());
    }
    // Train from the stored tuples so a rerun sees identical inputs.
    let tuples = load_tuples(&dir)?;
    let (refiner, losses) = train_refiner(&tuples, &cfg.refiner, &cfg.refine_train, &device())?;
    let mut log = LossLog::open(&out.join("loss.tsv"))?;
    for (i, l) in losses.iter().enumerate() {
        log.record(i as u64 + 1, *l, cfg.refine_train.lr)?;
    }
    save_refiner(&refiner, losses.len() as u64, out.join("refiner.safetensors"))?;
    println!("refiner trained on {} tuples", tuples.len());
    Ok(())
}

struct Models {
    codec: KlAutoencoder,
    denoiser: ConditionalUnet,
    refiner: Option<Refiner>,
    schedule: NoiseSchedule,
}

impl Models {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let codec = load_codec(require(&cfg.paths.codec, "codec", "--codec")?, &device())?;
        let denoiser = load_denoiser(require(&cfg.paths.denoiser, "denoiser", "--denoiser")?, &device())?;
        let refiner = if cfg.inference.refine {
            Some(load_refiner(
                require(&cfg.paths.refiner, "refiner", "--refiner")?,
                &device(),
            )?)
        } else {
            None
        };
        Ok(Self {
            codec,
            denoiser,
            refiner,
            schedule: cfg.schedule.build()?,
        })
    }

    fn stage_one(&self) -> StageOne<'_> {
        StageOne {
            codec: &self.codec,
            denoiser: &self.denoiser,
            schedule: &self.schedule,
        }
    }
}

/// An inference input: name, composite and mask.
pub struct InferItem {
    pub name: String,
    pub composite: RgbImage,
    pub mask: Mask,
}

/// `<name>.{png,jpg,jpeg}` files with a `<name>_mask.png` sibling, by name.
pub fn scan_input_dir(dir: &Path) -> Result<Vec<InferItem>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "input directory {} does not exist",
            dir.display()
        )));
    }
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
        if let (Some(ext), Some(stem)) = (ext, stem) {
            if matches!(ext.as_str(), "png" | "jpg" | "jpeg") && !stem.ends_with("_mask") {
                names.push((stem, path));
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::Data(format!("no input images in {}", dir.display())));
    }
    let missing: Vec<String> = names
        .iter()
        .map(|(stem, _)| dir.join(format!("{stem}_mask.png")))
        .filter(|m| !m.is_file())
        .map(|m| m.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!("missing masks:\n  {}", missing.join("\n  "))));
    }
    names
        .into_iter()
        .map(|(stem, path)| {
            Ok(InferItem {
                composite: RgbImage::load(&path)?,
                mask: Mask::load(dir.join(format!("{stem}_mask.png")))?,
                name: stem,
            })
        })
        .collect()
}

/// Stage one over `items` with per-item seeds `base_seed + index`, then the
/// refiner when loaded.
fn run_pipeline(
    cfg: &RunConfig,
    models: &Models,
    items: &[InferItem],
    base_seed: u64,
) -> Result<(Vec<Option<RgbImage>>, Vec<ManifestRecord>), CliError> {
    let inf = &cfg.inference;
    let requests: Vec<HarmonizationRequest> = items
        .iter()
        .map(|it| HarmonizationRequest {
            inference_resolution: inf.inference_resolution,
            output_resolution: inf.output_resolution,
            sampler: harmony_core::sampler::SamplerConfig {
                seed: base_seed,
                ..inf.sampler
            },
            blend_background: inf.blend_background,
            ..HarmonizationRequest::new(it.name.clone(), it.composite.clone(), it.mask.clone())
        })
        .collect();
    let opts = BatchOptions {
        base_seed,
        parallelism: inf.parallelism,
        micro_batch: inf.micro_batch,
    };
    let (mut images, mut manifest) = harmonize_batch(&requests, models.stage_one(), &opts)?;
    if let Some(refiner) = &models.refiner {
        let o = inf.output_resolution;
        for ((img, item), rec) in images.iter_mut().zip(items).zip(manifest.iter_mut()) {
            if let Some(h) = img.as_ref() {
                let comp = item.composite.resize_square(o);
                let mask = item.mask.resize_nearest(o, o);
                match refiner.refine(h, &comp, &mask) {
                    Ok(r) => *img = Some(r),
                    Err(e) => {
                        rec.error = Some(format!("refinement: {e}"));
                        *img = None;
                    }
                }
            }
        }
    }
    Ok((images, manifest))
}

fn write_outputs(
    out: &Path,
    items: &[InferItem],
    images: &[Option<RgbImage>],
    manifest: &mut [ManifestRecord],
) -> Result<usize, CliError> {
    std::fs::create_dir_all(out)?;
    let mut failed = 0;
    for ((item, img), rec) in items.iter().zip(images).zip(manifest.iter_mut()) {
        match img {
            Some(img) => {
                let file = format!("{}.png", item.name);
                img.save_png(out.join(&file))?;
                rec.output = Some(file);
            }
            None => failed += 1,
        }
    }
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).map_err(harmony_core::Error::from)?,
    )?;
    Ok(failed)
}

fn dataset_items(split: &SplitManifest) -> Result<(Vec<InferItem>, Vec<Triplet>), CliError> {
    let mut items = Vec::with_capacity(split.test.len());
    let mut triplets = Vec::with_capacity(split.test.len());
    for s in &split.test {
        let t = s.load()?;
        items.push(InferItem {
            name: s.id.clone(),
            composite: t.composite.clone(),
            mask: t.mask.clone(),
        });
        triplets.push(t);
    }
    Ok((items, triplets))
}

/// Writes one PNG per input plus `manifest.json`; returns the manifest.
pub fn infer(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    input: Option<&Path>,
    out: &Path,
) -> Result<Vec<ManifestRecord>, CliError> {
    let items = match input {
        Some(dir) => scan_input_dir(dir)?,
        None => dataset_items(&load_split(cfg, dataset)?)?.0,
    };
    let models = Models::load(cfg)?;
    cfg.echo(out)?;
    let (images, mut manifest) = run_pipeline(cfg, &models, &items, cfg.inference.sampler.seed)?;
    let failed = write_outputs(out, &items, &images, &mut manifest)?;
    if failed > 0 {
        return Err(CliError::Data(format!(
            "{failed} of {} inputs failed; see {}",
            items.len(),
            out.join("manifest.json").display()
        )));
    }
    println!("harmonized {} images into {}", items.len(), out.display());
    Ok(manifest)
}

pub enum Predictions {
    Directory(PathBuf),
    Composite,
    Inference,
}

pub fn evaluate(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    source: Predictions,
    out: &Path,
) -> Result<EvalReport, CliError> {
    let split = load_split(cfg, dataset)?;
    let (items, triplets) = dataset_items(&split)?;
    let res = cfg.inference.output_resolution;
    let mode = cfg.evaluate.pixel_mode;
    let mut notes = vec![format!("pixel mode: {}", mode.label())];
    let mut records = Vec::new();
    let score = |records: &mut Vec<EvalRecord>, id: &str, pred: &RgbImage, t: &Triplet, seed: u64| {
        records.push(EvalRecord::score(id, pred, &t.real, &t.mask, res, mode, seed)?);
        Ok::<_, CliError>(())
    };
    match &source {
        Predictions::Directory(_) | Predictions::Composite if cfg.evaluate.seeds > 1 => {
            return Err(CliError::Usage(
                "--seeds needs inference; drop --pred/--composite-baseline".into(),
            ));
        }
        Predictions::Directory(dir) => {
            let missing: Vec<String> = items
                .iter()
                .map(|it| dir.join(format!("{}.png", it.name)))
                .filter(|p| !p.is_file())
                .map(|p| p.display().to_string())
                .collect();
            if !missing.is_empty() {
                return Err(CliError::Data(format!(
                    "{} predictions missing, e.g. {}",
                    missing.len(),
                    missing[0]
                )));
            }
            notes.push(format!("predictions: {}", dir.display()));
            for (it, t) in items.iter().zip(&triplets) {
                let pred = RgbImage::load(dir.join(format!("{}.png", it.name)))?;
                score(&mut records, &it.name, &pred, t, cfg.inference.sampler.seed)?;
            }
        }
        Predictions::Composite => {
            notes.push("predictions: unmodified composites".into());
            for (it, t) in items.iter().zip(&triplets) {
                score(&mut records, &it.name, &t.composite, t, 0)?;
            }
        }
        Predictions::Inference => {
            let models = Models::load(cfg)?;
            notes.push(format!(
                "inference {}px, {} steps, guidance {}, background {}, refinement {}",
                cfg.inference.inference_resolution,
                cfg.inference.sampler.num_inference_steps,
                cfg.inference.sampler.guidance_scale,
                if cfg.inference.blend_background {
                    "pasted"
                } else {
                    "sampled"
                },
                if cfg.inference.refine { "on" } else { "off" }
            ));
            let n = items.len() as u64;
            for k in 0..cfg.evaluate.seeds as u64 {
                let base = cfg.inference.sampler.seed.wrapping_add(k * n);
                let (images, mut manifest) = run_pipeline(cfg, &models, &items, base)?;
                let failed = write_outputs(&out.join(format!("seed_{base}")), &items, &images, &mut manifest)?;
                if failed > 0 {
                    return Err(CliError::Data(format!("{failed} inputs failed for seed {base}")));
                }
                for ((it, t), img) in items.iter().zip(&triplets).zip(&images) {
                    score(&mut records, &it.name, img.as_ref().expect("no failures"), t, base)?;
                }
            }
        }
    }
    let report = aggregate(&records, &SplitManifest::index(&split.test), mode, notes)?;
    cfg.echo(out)?;
    write_records(&records, out.join("records.tsv"))?;
    report.write_tsv(out.join("report.tsv"))?;
    let table = report.to_table();
    std::fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(report)
}

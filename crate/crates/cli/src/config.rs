//! Run configuration: preset defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use harmony_core::codec::{CodecConfig, CodecTrainConfig};
use harmony_core::dataset::AugmentConfig;
use harmony_core::denoiser::DenoiserConfig;
use harmony_core::metrics::PixelMode;
use harmony_core::refine::{RefinerConfig, RefinerTrainConfig};
use harmony_core::sampler::SamplerConfig;
use harmony_core::schedule::ScheduleConfig;
use harmony_core::synth::SyntheticConfig;
use harmony_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const DATASET_ENV: &str = "HARMONY_DATASET_ROOT";
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64px synthetic data and small networks; trains on a CPU.
    Toy,
    /// Published model sizes and training recipe.
    Full,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset_root: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    pub denoiser: Option<PathBuf>,
    pub refiner: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Side length of the written images.
    pub image_size: usize,
    pub generator: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    /// Training-state checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Augmented views per training sample; 0 uses each sample once, resized.
    pub augment_views: usize,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TupleSection {
    pub inference_resolution: usize,
    pub output_resolution: usize,
    pub variants: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub inference_resolution: usize,
    pub output_resolution: usize,
    pub sampler: SamplerConfig,
    pub blend_background: bool,
    pub refine: bool,
    pub micro_batch: usize,
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Inference repetitions with distinct seeds; 1 reports plain means.
    pub seeds: usize,
    pub pixel_mode: PixelMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub preset: Preset,
    pub paths: Paths,
    pub synth: SynthSection,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub train_run: TrainRun,
    pub refiner: RefinerConfig,
    pub refine_train: RefinerTrainConfig,
    pub tuples: TupleSection,
    pub inference: InferenceSection,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self {
                version: CONFIG_VERSION,
                preset,
                paths: Paths::default(),
                synth: SynthSection {
                    image_size: 64,
                    generator: SyntheticConfig::default(),
                },
                codec: CodecConfig::toy(),
                codec_train: CodecTrainConfig {
                    steps: 1500,
                    batch_size: 16,
                    lr: 1e-3,
                    ..CodecTrainConfig::default()
                },
                denoiser: DenoiserConfig::toy(),
                schedule: ScheduleConfig::default(),
                train: TrainConfig::toy(),
                train_run: TrainRun {
                    checkpoint_every: 500,
                    augment_views: 0,
                    augment: AugmentConfig::default(),
                },
                refiner: RefinerConfig::toy(),
                refine_train: RefinerTrainConfig {
                    steps: 1000,
                    crop_size: 32,
                    ..RefinerTrainConfig::default()
                },
                tuples: TupleSection {
                    inference_resolution: 64,
                    output_resolution: 64,
                    variants: 1,
                    base_seed: 0,
                },
                inference: InferenceSection {
                    inference_resolution: 64,
                    output_resolution: 64,
                    sampler: SamplerConfig::default(),
                    blend_background: true,
                    refine: true,
                    micro_batch: 16,
                    parallelism: 1,
                },
                evaluate: EvaluateSection {
                    seeds: 1,
                    pixel_mode: PixelMode::Float,
                },
            },
            Preset::Full => {
                let toy = Self::preset(Preset::Toy);
                Self {
                    preset,
                    synth: SynthSection {
                        image_size: 512,
                        ..toy.synth
                    },
                    codec: CodecConfig::full(),
                    codec_train: CodecTrainConfig {
                        crop_size: 256,
                        ..CodecTrainConfig::default()
                    },
                    refine_train: RefinerTrainConfig::default(),
                    denoiser: DenoiserConfig::full(),
                    train: TrainConfig::paper(),
                    train_run: TrainRun {
                        checkpoint_every: 10_000,
                        augment_views: 1,
                        ..toy.train_run
                    },
                    refiner: RefinerConfig::full(),
                    tuples: TupleSection {
                        inference_resolution: 512,
                        output_resolution: 256,
                        ..toy.tuples
                    },
                    inference: InferenceSection {
                        inference_resolution: 1024,
                        output_resolution: 256,
                        micro_batch: 1,
                        ..toy.inference
                    },
                    ..toy
                }
            }
        }
    }

    /// Preset defaults overlaid with the keys present in `text`. The preset
    /// comes from `preset_override`, else from the file, else toy.
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> Result<Self, CliError> {
        let file: toml::Table = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let preset = match preset_override {
            Some(p) => p,
            None => match file.get("preset") {
                Some(v) => v
                    .clone()
                    .try_into()
                    .map_err(|e| CliError::Usage(format!("config: preset: {e}")))?,
                None => Preset::Toy,
            },
        };
        let mut base =
            toml::Table::try_from(Self::preset(preset)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        merge(&mut base, file);
        base.insert(
            "preset".into(),
            toml::Value::try_from(preset).expect("preset serializes"),
        );
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, preset_override)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ECHO_FILE), self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: harmony_core::Error| CliError::Usage(e.to_string());
        self.codec.validate().map_err(usage)?;
        self.denoiser.validate().map_err(usage)?;
        self.refiner.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.codec.latent_channels != self.denoiser.latent_channels {
            return Err(CliError::Usage(format!(
                "codec has {} latent channels but the denoiser expects {}",
                self.codec.latent_channels, self.denoiser.latent_channels
            )));
        }
        let f = self.codec.downsample_factor;
        let latent_div = f * self.denoiser.spatial_divisor();
        for (name, r) in [
            ("inference.inference_resolution", self.inference.inference_resolution),
            ("tuples.inference_resolution", self.tuples.inference_resolution),
            ("train.train_resolution", self.train.train_resolution),
        ] {
            if r == 0 || r % latent_div != 0 {
                return Err(CliError::Usage(format!(
                    "{name} = {r} must be a positive multiple of {latent_div}"
                )));
            }
        }
        let rd = self.refiner.spatial_divisor();
        for (name, r) in [
            ("inference.output_resolution", self.inference.output_resolution),
            ("tuples.output_resolution", self.tuples.output_resolution),
        ] {
            if r == 0 || r % rd != 0 {
                return Err(CliError::Usage(format!(
                    "{name} = {r} must be a positive multiple of {rd}"
                )));
            }
        }
        if self.inference.sampler.num_inference_steps == 0 {
            return Err(CliError::Usage(
                "inference.sampler.num_inference_steps must be positive".into(),
            ));
        }
        if self.evaluate.seeds == 0 || self.tuples.variants == 0 {
            return Err(CliError::Usage(
                "evaluate.seeds and tuples.variants must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `--dataset`, then the environment variable, then `paths.dataset_root`.
    pub fn dataset_root(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(DATASET_ENV).map(PathBuf::from))
            .or_else(|| self.paths.dataset_root.clone())
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "no dataset root: pass --dataset, set {DATASET_ENV} or paths.dataset_root"
                ))
            })?;
        if !root.is_dir() {
            return Err(CliError::Usage(format!(
                "dataset root {} does not exist",
                root.display()
            )));
        }
        Ok(root)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

//! The `harmony` command line: data synthesis, training of both stages,
//! inference, evaluation and qualitative grids.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod grid;

pub use config::{Preset, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// 2 for usage or configuration problems, 3 for unusable data, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<harmony_core::Error> for CliError {
    fn from(e: harmony_core::Error) -> Self {
        use harmony_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Param(_) => CliError::Usage(msg),
            E::Training(_) | E::Tensor(_) => CliError::Numerical(msg),
            E::Validation(_)
            | E::MissingFiles(_)
            | E::Aggregation(_)
            | E::Checkpoint(_)
            | E::Image(_)
            | E::Io(_)
            | E::Json(_)
            | E::Csv(_) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "harmony", version, about = "Latent-diffusion image harmonization")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by all subcommands. Flags win over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run config; missing keys take the preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Inference resolution (the published settings are 512 and 1024).
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Sampling steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Sets every seed of the run: data synthesis, training and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation repeats with distinct sampling seeds.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Skip the refinement stage.
    #[arg(long, global = true)]
    pub no_refine: bool,
    /// Keep the sampled background instead of pasting the composite's.
    #[arg(long, global = true)]
    pub no_blend: bool,
    /// Dataset root; overrides the environment variable and the config.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelPaths {
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub refiner: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved run config.
    Config,
    /// Write a procedural composite dataset in iHarmony4 layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent autoencoder on the real images of the train split.
    TrainCodec {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the conditional denoiser (stage one).
    TrainHarmony {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        models: ModelPaths,
        /// Training state to continue from; the run config may extend the horizon.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the refinement network on stage-one outputs.
    TrainRefine {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        models: ModelPaths,
        /// Tuple directory; generated there when absent. Defaults to `<out>/tuples`.
        #[arg(long)]
        tuples: Option<PathBuf>,
    },
    /// Harmonize every `<name>.png` with a `<name>_mask.png` in `--input`,
    /// or the test split of the dataset when no input is given.
    Infer {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        models: ModelPaths,
    },
    /// Score predictions on the test split, or run inference per seed.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        /// Directory of `<sample id>.png` predictions.
        #[arg(long, conflicts_with = "composite_baseline")]
        pred: Option<PathBuf>,
        /// Score the unmodified composites.
        #[arg(long)]
        composite_baseline: bool,
        #[command(flatten)]
        models: ModelPaths,
    },
    /// Side-by-side grid: one row per sample, columns input | output | ground truth.
    ReportGrid {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long = "output", required = true)]
        outputs: Vec<PathBuf>,
        #[arg(long = "gt", required = true)]
        gts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Cell side length in pixels.
        #[arg(long, default_value_t = 128)]
        cell: usize,
    },
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, self.preset)?,
            None => RunConfig::preset(self.preset.unwrap_or(Preset::Toy)),
        };
        if let Some(r) = self.resolution {
            cfg.inference.inference_resolution = r;
        }
        if let Some(s) = self.steps {
            cfg.inference.sampler.num_inference_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.synth.generator.seed = s;
            cfg.codec_train.seed = s;
            cfg.train.seed = s;
            cfg.refine_train.seed = s;
            cfg.tuples.base_seed = s;
            cfg.inference.sampler.seed = s;
        }
        if let Some(n) = self.seeds {
            cfg.evaluate.seeds = n;
        }
        if self.no_refine {
            cfg.inference.refine = false;
        }
        if self.no_blend {
            cfg.inference.blend_background = false;
        }
        if let Some(d) = &self.dataset {
            cfg.paths.dataset_root = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = cli.overrides.resolve()?;
    let dataset = cli.overrides.dataset.as_deref();
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::TrainCodec { out } => commands::train_codec(&cfg, dataset, &out),
        Command::TrainHarmony { out, models, resume } => {
            models.apply(&mut cfg);
            commands::train_harmony(&cfg, dataset, &out, resume.as_deref())
        }
        Command::TrainRefine { out, models, tuples } => {
            models.apply(&mut cfg);
            commands::train_refine(&cfg, dataset, &out, tuples.as_deref())
        }
        Command::Infer { out, input, models } => {
            models.apply(&mut cfg);
            commands::infer(&cfg, dataset, input.as_deref(), &out).map(|_| ())
        }
        Command::Evaluate {
            out,
            pred,
            composite_baseline,
            models,
        } => {
            models.apply(&mut cfg);
            let source = match (pred, composite_baseline) {
                (Some(p), _) => commands::Predictions::Directory(p),
                (None, true) => commands::Predictions::Composite,
                (None, false) => commands::Predictions::Inference,
            };
            commands::evaluate(&cfg, dataset, source, &out).map(|_| ())
        }
        Command::ReportGrid {
            inputs,
            outputs,
            gts,
            out,
            cell,
        } => grid::report_grid(&inputs, &outputs, &gts, cell, &out),
    }
}

impl ModelPaths {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.codec {
            cfg.paths.codec = Some(p.clone());
        }
        if let Some(p) = &self.denoiser {
            cfg.paths.denoiser = Some(p.clone());
        }
        if let Some(p) = &self.refiner {
            cfg.paths.refiner = Some(p.clone());
        }
    }
}

use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffract_core::dataset::{DatasetConfig, Split, DATASET_MAGIC};
use diffract_core::inference::InferenceConfig;
use diffract_core::model::{load_checkpoint, DenoiserConfig};
use diffract_core::schedule::DEFAULT_STEPS;
use diffract_core::training::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path, RunManifest};
use crate::plan::*;

pub const DESK_STEPS: usize = 64;
pub const DESK_EPOCHS: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "diffract", version, about = "Adaptive diffusion denoising of Kikuchi diffraction patterns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the denoiser (stage 1) or the quality head (stage 2).
    Train(TrainArgs),
    /// Restore patterns with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score restored outputs against the clean patterns.
    Eval(EvalArgs),
    /// Compare the fixed schedule with the feedback components added one by one.
    Ablate(AblateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub val: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_frac: f64,
    #[arg(long, default_value_t = 3)]
    pub min_bands: usize,
    #[arg(long, default_value_t = 8)]
    pub max_bands: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the train split when the dataset's manifest records one.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Stage-1 checkpoint the quality head is trained on.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Small preset for quick runs: T=64 and 10 epochs.
    #[arg(long)]
    pub desk: bool,
    /// Number of diffusion steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    /// Stop once the predicted progress reaches this level.
    #[arg(long, default_value_t = 1.0)]
    pub target_progress: f64,
    /// Inputs whose best predicted progress stays below this are flagged as noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise_threshold: f64,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long, value_enum, default_value = "feedback")]
    pub mode: Mode,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub data: Option<PathBuf>,
    /// Defaults to the test split when the dataset's manifest records one.
    #[arg(long, value_enum, requires = "data")]
    pub split: Option<SplitArg>,
    /// A single PGM pattern instead of a dataset.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Output directory.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Directory written by `denoise`; repeat for several modes.
    #[arg(long)]
    pub restored: Vec<PathBuf>,
    /// JSON report.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// JSON report.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write to this path instead of the recorded output.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

/// Sample count and side length from a dataset file header.
fn dataset_header(path: &Path) -> CliResult<(usize, usize)> {
    use std::io::Read;
    let mut head = [0u8; 24];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| CliError::io(path, e))?;
    if head[..8] != DATASET_MAGIC {
        return Err(CliError::format(path, "not a dataset file"));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width, count) = (word(12), word(16), word(20));
    if height != width {
        return Err(CliError::format(path, format!("patterns must be square, found {height}x{width}")));
    }
    Ok((count, height))
}

fn recorded_layout(path: &Path) -> Option<DatasetConfig> {
    let sidecar = manifest_path(path, false);
    match RunManifest::read(&sidecar).ok()?.plan {
        Plan::GenData(p) => Some(p.dataset),
        _ => None,
    }
}

/// Resolve `--split` against the layout recorded by `gen-data`. Without a
/// recorded layout only the whole file can be addressed.
pub fn resolve_data(path: &Path, split: Option<SplitArg>, default: Split) -> CliResult<DataRef> {
    let (count, _) = dataset_header(path)?;
    let samples: Range<usize> = match (split, recorded_layout(path)) {
        (Some(SplitArg::All), _) => 0..count,
        (None, None) => 0..count,
        (Some(s), Some(cfg)) => cfg.layout().range(split_of(s)),
        (None, Some(cfg)) => cfg.layout().range(default),
        (Some(_), None) => {
            return Err(CliError::usage(format!(
                "{} has no recorded split layout; use --split all",
                path.display()
            )))
        }
    };
    if samples.end > count {
        return Err(CliError::format(path, "recorded split layout does not match the file"));
    }
    if samples.is_empty() {
        return Err(CliError::usage(format!("selected split of {} is empty", path.display())));
    }
    Ok(DataRef { path: path.to_path_buf(), samples })
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test | SplitArg::All => Split::Test,
    }
}

fn checkpoint_steps(path: &Path) -> CliResult<usize> {
    Ok(load_checkpoint::<f32>(path)?.steps)
}

fn inference_config(args: &InferenceArgs, steps: usize) -> CliResult<InferenceConfig> {
    let cfg = InferenceConfig {
        target_progress: args.target_progress,
        hallucination_threshold: args.noise_threshold,
        ..InferenceConfig::with_steps(steps)
    };
    cfg.validate()?;
    Ok(cfg)
}

impl GenDataArgs {
    pub fn resolve(self) -> CliResult<Plan> {
        let dataset = DatasetConfig {
            train: self.train,
            val: self.val,
            test: self.test,
            size: self.size,
            noise_frac: self.noise_frac,
            min_bands: self.min_bands,
            max_bands: self.max_bands,
        };
        dataset.validate()?;
        Ok(Plan::GenData(GenDataPlan { dataset, seed: self.seed, output: self.output }))
    }
}

impl TrainArgs {
    pub fn resolve(self) -> CliResult<Plan> {
        let data = resolve_data(&self.data, self.split, Split::Train)?;
        let (_, size) = dataset_header(&self.data)?;
        let defaults = TrainConfig::default();
        let epochs = self.epochs.unwrap_or(if self.desk { DESK_EPOCHS } else { defaults.epochs });
        let train = TrainConfig {
            epochs,
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            lr_max: self.lr_max.unwrap_or(defaults.lr_max),
            lr_min: self.lr_min.unwrap_or(defaults.lr_min),
            seed: self.seed,
            ..defaults
        };
        train.validate()?;
        let (steps, model, from) = match self.stage {
            Stage::Denoiser => {
                if self.from.is_some() {
                    return Err(CliError::usage("--from only applies to --stage quality"));
                }
                let base = DenoiserConfig::default();
                let model = DenoiserConfig {
                    size,
                    width: self.width.unwrap_or(base.width),
                    depth: self.depth.unwrap_or(base.depth),
                    ..base
                };
                model.validate()?;
                let steps = self.steps.unwrap_or(if self.desk { DESK_STEPS } else { DEFAULT_STEPS });
                (steps, Some(model), None)
            }
            Stage::Quality => {
                let from = self
                    .from
                    .ok_or_else(|| CliError::usage("--stage quality needs a stage-1 checkpoint (--from)"))?;
                if self.width.is_some() || self.depth.is_some() {
                    return Err(CliError::usage("the architecture comes from the --from checkpoint"));
                }
                let steps = checkpoint_steps(&from)?;
                if self.steps.is_some_and(|t| t != steps) {
                    return Err(CliError::usage(format!("checkpoint was trained with T = {steps}")));
                }
                (steps, None, Some(from))
            }
        };
        if steps == 0 {
            return Err(CliError::usage("T must be positive"));
        }
        Ok(Plan::Train(TrainPlan { stage: self.stage, data, from, steps, model, train, output: self.output }))
    }
}

impl DenoiseArgs {
    pub fn resolve(self) -> CliResult<Plan> {
        let source = match (self.data, self.input) {
            (Some(d), None) => Source::Dataset(resolve_data(&d, self.split, Split::Test)?),
            (None, Some(p)) => Source::Pattern(p),
            _ => return Err(CliError::usage("give exactly one of --data and --input")),
        };
        let inference = inference_config(&self.inference, checkpoint_steps(&self.ckpt)?)?;
        Ok(Plan::Denoise(DenoisePlan { mode: self.mode, ckpt: self.ckpt, source, inference, output: self.output }))
    }
}

impl EvalArgs {
    pub fn resolve(self) -> CliResult<Plan> {
        let data = resolve_data(&self.data, self.split, Split::Test)?;
        Ok(Plan::Eval(EvalPlan { data, restored: self.restored, output: self.output }))
    }
}

impl AblateArgs {
    pub fn resolve(self) -> CliResult<Plan> {
        let data = resolve_data(&self.data, self.split, Split::Test)?;
        let inference = inference_config(&self.inference, checkpoint_steps(&self.ckpt)?)?;
        Ok(Plan::Ablate(AblatePlan { ckpt: self.ckpt, data, inference, output: self.output }))
    }
}

//! Fully resolved command configurations. A plan carries every value a run
//! depends on, so executing the same plan twice yields the same artifacts.

use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use diffract_core::dataset::DatasetConfig;
use diffract_core::inference::{InferenceConfig, Procedure};
use diffract_core::model::DenoiserConfig;
use diffract_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Denoiser,
    Quality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Feedback,
    Fixed,
    OneStep,
    OneStepTx,
}

impl Mode {
    pub fn procedure(self) -> Procedure {
        match self {
            Mode::Feedback => Procedure::Feedback,
            Mode::Fixed => Procedure::Fixed,
            Mode::OneStep => Procedure::OneStep,
            Mode::OneStepTx => Procedure::OneStepTx,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Feedback => "feedback",
            Mode::Fixed => "fixed",
            Mode::OneStep => "one-step",
            Mode::OneStepTx => "one-step-tx",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Feedback => "Feedback",
            Mode::Fixed => "Fixed schedule",
            Mode::OneStep => "One-step",
            Mode::OneStepTx => "One-step with t_x assessment",
        }
    }
}

/// A dataset file and the sample range a command works on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRef {
    pub path: PathBuf,
    pub samples: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Dataset(DataRef),
    Pattern(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataPlan {
    pub dataset: DatasetConfig,
    pub seed: u64,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub data: DataRef,
    pub from: Option<PathBuf>,
    pub steps: usize,
    /// Architecture of a fresh denoiser; `None` for the quality stage.
    pub model: Option<DenoiserConfig>,
    pub train: TrainConfig,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoisePlan {
    pub mode: Mode,
    pub ckpt: PathBuf,
    pub source: Source,
    pub inference: InferenceConfig,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub data: DataRef,
    pub restored: Vec<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblatePlan {
    pub ckpt: PathBuf,
    pub data: DataRef,
    pub inference: InferenceConfig,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Plan {
    GenData(GenDataPlan),
    Train(TrainPlan),
    Denoise(DenoisePlan),
    Eval(EvalPlan),
    Ablate(AblatePlan),
}

impl Plan {
    pub fn name(&self) -> &'static str {
        match self {
            Plan::GenData(_) => "gen-data",
            Plan::Train(_) => "train",
            Plan::Denoise(_) => "denoise",
            Plan::Eval(_) => "eval",
            Plan::Ablate(_) => "ablate",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Plan::GenData(p) => Some(p.seed),
            Plan::Train(p) => Some(p.train.seed),
            _ => None,
        }
    }

    pub fn output(&self) -> &Path {
        match self {
            Plan::GenData(p) => &p.output,
            Plan::Train(p) => &p.output,
            Plan::Denoise(p) => &p.output,
            Plan::Eval(p) => &p.output,
            Plan::Ablate(p) => &p.output,
        }
    }

    pub fn set_output(&mut self, output: PathBuf) {
        match self {
            Plan::GenData(p) => p.output = output,
            Plan::Train(p) => p.output = output,
            Plan::Denoise(p) => p.output = output,
            Plan::Eval(p) => p.output = output,
            Plan::Ablate(p) => p.output = output,
        }
    }

    /// Files and directories the run reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Plan::GenData(_) => Vec::new(),
            Plan::Train(p) => std::iter::once(p.data.path.clone()).chain(p.from.clone()).collect(),
            Plan::Denoise(p) => {
                let src = match &p.source {
                    Source::Dataset(d) => d.path.clone(),
                    Source::Pattern(path) => path.clone(),
                };
                vec![p.ckpt.clone(), src]
            }
            Plan::Eval(p) => std::iter::once(p.data.path.clone()).chain(p.restored.iter().cloned()).collect(),
            Plan::Ablate(p) => vec![p.ckpt.clone(), p.data.path.clone()],
        }
    }

    /// Denoise writes a directory; every other command writes files.
    pub fn writes_directory(&self) -> bool {
        matches!(self, Plan::Denoise(_))
    }
}

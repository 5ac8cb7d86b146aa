//! Experiment configuration and presets.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::data::{generate_synthetic_benchmark, load_external_dataset, SplitBenchmark, SyntheticSpec};
use crate::error::{Error, Result};
use crate::prompts::PromptConfig;
use crate::trainer::{Mode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural classes. Its `seed` is added to the run seed, so
    /// different run seeds also draw different datasets.
    Synthetic(SyntheticSpec),
    External {
        manifest: PathBuf,
        #[serde(default)]
        classes_per_task: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub precision: Precision,
    /// Seeds used by batch commands; `train --seed` picks one run.
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    /// Load a frozen backbone checkpoint instead of pretraining.
    #[serde(default)]
    pub backbone_checkpoint: Option<PathBuf>,
    pub prompts: PromptConfig,
    pub train: TrainConfig,
    /// Also train jointly on all tasks merged into one and report the gap
    /// to that upper bound.
    #[serde(default)]
    pub upper_bound: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperCifar,
    PaperImagenetR,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Desk, Preset::PaperCifar, Preset::PaperImagenetR];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::PaperCifar => "paper-cifar",
            Preset::PaperImagenetR => "paper-imagenet-r",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            name: "desk".into(),
            precision: Precision::F32,
            seeds: vec![0, 1, 2],
            data: DataSource::Synthetic(SyntheticSpec::default()),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            backbone_checkpoint: None,
            prompts: PromptConfig::default(),
            train: TrainConfig::default(),
            upper_bound: false,
        };
        // Full-scale settings: a ViT-B/16-sized backbone on 224×224 inputs.
        // Recorded for reference; far beyond a desk CPU.
        let vit = BackboneConfig { image_side: 224, channels: 3, patch: 16, dim: 768, depth: 12, heads: 12, mlp_ratio: 4 };
        let big_data = |classes_per_task| SyntheticSpec {
            tasks: 10,
            classes_per_task,
            side: 224,
            pretrain_classes: 20,
            ..SyntheticSpec::default()
        };
        match p {
            Preset::Desk => desk,
            Preset::PaperCifar => Self {
                name: "paper-cifar".into(),
                data: DataSource::Synthetic(big_data(10)),
                backbone: vit,
                prompts: PromptConfig { task_len: 5, task_depth: 5, general_len: 1, general_depth: 1, ..PromptConfig::default() },
                train: TrainConfig { gke_epochs: 5, max_epochs: 15, o_per_class: 8, ..TrainConfig::default() },
                ..desk
            },
            Preset::PaperImagenetR => Self {
                name: "paper-imagenet-r".into(),
                data: DataSource::Synthetic(big_data(20)),
                backbone: vit,
                prompts: PromptConfig { task_len: 25, task_depth: 7, general_len: 1, general_depth: 1, ..PromptConfig::default() },
                train: TrainConfig { gke_epochs: 5, max_epochs: 65, o_per_class: 4, ..TrainConfig::default() },
                ..desk
            },
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.train.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompts.validate(self.backbone.depth)?;
        self.train.validate()?;
        if self.pretrain.epochs > 0 && (self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0)) {
            return Err(Error::Config("pretrain needs a positive batch size and learning rate".into()));
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.side != self.backbone.image_side || s.channels != self.backbone.channels {
                return Err(Error::Config(format!(
                    "synthetic images are {}x{}x{} but the backbone expects {}x{}x{}",
                    s.side, s.side, s.channels, self.backbone.image_side, self.backbone.image_side, self.backbone.channels
                )));
            }
            if s.tasks == 0 || s.classes_per_task == 0 || s.train_per_class == 0 || s.test_per_class == 0 {
                return Err(Error::Config("synthetic benchmark counts must be positive".into()));
            }
            if self.backbone_checkpoint.is_none() && s.pretrain_classes == 0 {
                return Err(Error::Config("pretraining needs pretrain_classes > 0 or a backbone checkpoint".into()));
            }
        }
        Ok(())
    }

    /// Parses and validates a JSON config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Builds the benchmark for one run seed.
    pub fn benchmark(&self, seed: u64) -> Result<SplitBenchmark> {
        match &self.data {
            DataSource::Synthetic(s) => {
                let spec = SyntheticSpec { seed: s.seed.wrapping_add(seed), ..s.clone() };
                generate_synthetic_benchmark(&spec)
            }
            DataSource::External { manifest, classes_per_task } => load_external_dataset(manifest, *classes_per_task),
        }
    }
}

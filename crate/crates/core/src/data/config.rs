//! Flat `key = value` run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use crate::data::manifest::DatasetSpec;
use crate::encoder3d::Encoder3DConfig;
use crate::error::{Error, Result};
use crate::mvagg::AggregatorConfig;
use crate::training::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelProfile {
    Desk,
    PaperShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalAggregator {
    Learned,
    MeanPool,
}

/// Everything a run needs: dataset shape, model profile, training
/// hyperparameters, and file locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: ModelProfile,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub objects: usize,
    pub classes: usize,
    pub views: usize,
    pub points: usize,
    pub dim: usize,
    pub with_text: bool,
    pub textureless: bool,
    pub ablate_normals: bool,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub learning_rate: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub stage1_checkpoint: PathBuf,
    pub stage2_checkpoint: PathBuf,
    pub index_file: PathBuf,
    pub loss_log: Option<PathBuf>,
    pub eval_aggregator: EvalAggregator,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let stage1 = TrainConfig::desk_stage(1, 0);
        let stage2 = TrainConfig::desk_stage(2, 0);
        RunConfig {
            profile: ModelProfile::Desk,
            seed: 42,
            data_dir: PathBuf::from("data"),
            objects: 64,
            classes: 6,
            views: 12,
            points: 2048,
            dim: 64,
            with_text: true,
            textureless: false,
            ablate_normals: false,
            batch_size: stage1.batch_size,
            epochs_stage1: stage1.epochs,
            epochs_stage2: stage2.epochs,
            learning_rate: stage1.learning_rate,
            tau_init: stage1.tau_init,
            tau_min: stage1.tau_min,
            tau_max: stage1.tau_max,
            stage1_checkpoint: PathBuf::from("stage1.fbck"),
            stage2_checkpoint: PathBuf::from("stage2.fbck"),
            index_file: PathBuf::from("index.fbix"),
            loss_log: None,
            eval_aggregator: EvalAggregator::Learned,
        }
    }
}

impl RunConfig {
    /// Model architecture for this run. The desk profile takes its joint
    /// dimension from the dataset's feature dim.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let model = match self.profile {
            ModelProfile::Desk => {
                let mut encoder = Encoder3DConfig::desk();
                encoder.joint_dim = self.dim;
                let mut aggregator = AggregatorConfig::desk();
                aggregator.feature_dim = self.dim;
                ModelConfig {
                    encoder,
                    aggregator,
                    ablate_normals: self.ablate_normals,
                }
            }
            ModelProfile::PaperShape => ModelConfig {
                encoder: Encoder3DConfig::paper_shape(),
                aggregator: AggregatorConfig::paper_shape(),
                ablate_normals: self.ablate_normals,
            },
        };
        model.validate()?;
        if self.dim != model.aggregator.feature_dim {
            return Err(Error::Usage(format!(
                "dataset dim {} does not match the {} profile's feature dim {}",
                self.dim,
                match self.profile {
                    ModelProfile::Desk => "desk",
                    ModelProfile::PaperShape => "paper-shape",
                },
                model.aggregator.feature_dim
            )));
        }
        Ok(model)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_objects: self.objects,
            n_classes: self.classes,
            views_per_object: self.views,
            points_per_cloud: self.points,
            feature_dim: self.dim,
            with_text: self.with_text,
            textureless: self.textureless,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: if stage == 1 { self.epochs_stage1 } else { self.epochs_stage2 },
            learning_rate: self.learning_rate,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            seed: self.seed,
            stage,
        }
    }
}

fn parse_bool(value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Usage(format!(
            "config line {line}: expected a boolean, got '{value}'"
        ))),
    }
}

/// Parse flat `key = value` text over the defaults. Unknown keys are hard
/// errors; `#` starts a comment line.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = n + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Usage(format!(
                "config line {lineno} is not 'key = value': '{line}'"
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| {
                    Error::Usage(format!("config line {lineno}: bad value '{value}' for '{key}'"))
                })?
            };
        }
        match key {
            "model.profile" => {
                cfg.profile = match value {
                    "desk" => ModelProfile::Desk,
                    "paper-shape" => ModelProfile::PaperShape,
                    _ => {
                        return Err(Error::Usage(format!(
                            "config line {lineno}: profile must be 'desk' or 'paper-shape'"
                        )))
                    }
                }
            }
            "model.ablate_normals" => cfg.ablate_normals = parse_bool(value, lineno)?,
            "seed" => cfg.seed = num!(u64),
            "paths.data_dir" => cfg.data_dir = PathBuf::from(value),
            "paths.stage1_checkpoint" => cfg.stage1_checkpoint = PathBuf::from(value),
            "paths.stage2_checkpoint" => cfg.stage2_checkpoint = PathBuf::from(value),
            "paths.index" => cfg.index_file = PathBuf::from(value),
            "paths.loss_log" => cfg.loss_log = Some(PathBuf::from(value)),
            "dataset.objects" => cfg.objects = num!(usize),
            "dataset.classes" => cfg.classes = num!(usize),
            "dataset.views" => cfg.views = num!(usize),
            "dataset.points" => cfg.points = num!(usize),
            "dataset.dim" => cfg.dim = num!(usize),
            "dataset.text" => cfg.with_text = parse_bool(value, lineno)?,
            "dataset.textureless" => cfg.textureless = parse_bool(value, lineno)?,
            "train.batch_size" => cfg.batch_size = num!(usize),
            "train.epochs_stage1" => cfg.epochs_stage1 = num!(usize),
            "train.epochs_stage2" => cfg.epochs_stage2 = num!(usize),
            "train.learning_rate" => cfg.learning_rate = num!(f64),
            "train.tau_init" => cfg.tau_init = num!(f64),
            "train.tau_min" => cfg.tau_min = num!(f64),
            "train.tau_max" => cfg.tau_max = num!(f64),
            "eval.aggregator" => {
                cfg.eval_aggregator = match value {
                    "learned" => EvalAggregator::Learned,
                    "mean-pool" => EvalAggregator::MeanPool,
                    _ => {
                        return Err(Error::Usage(format!(
                            "config line {lineno}: aggregator must be 'learned' or 'mean-pool'"
                        )))
                    }
                }
            }
            _ => {
                return Err(Error::Usage(format!(
                    "unknown config key '{key}' on line {lineno}"
                )))
            }
        }
    }
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config(&text)
}

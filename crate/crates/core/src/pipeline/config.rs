use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SceneSpec;
use super::PipelineError;
use crate::model::{MergeType, ModelConfig};
use crate::trainloss::{LossConfig, TrainConfig};

pub const DESK_TOML: &str = include_str!("../../../../configs/desk.toml");
pub const PAPER_TOML: &str = include_str!("../../../../configs/paper.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub label_smoothing: f64,
    pub lambda: f64,
    /// Fixed class weights; when absent they are derived from the training
    /// labels by inverse frequency.
    #[serde(default)]
    pub class_weights: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Seed of the weight initialization.
    pub init_seed: u64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
}

impl TrainSection {
    pub fn stage1(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn stage2(&self) -> TrainConfig {
        TrainConfig {
            lr: self.stage2_lr,
            epochs: self.stage2_epochs,
            seed: self.seed.wrapping_add(1),
            ..self.stage1()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Manifest path, relative to the configuration file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossSection,
    pub train: TrainSection,
    pub scene: SceneSpec,
    pub splits: SplitSection,
    #[serde(default)]
    pub data: DataSection,
}

impl Config {
    pub fn desk() -> Self {
        Self::parse(DESK_TOML).expect("shipped desk profile parses")
    }

    pub fn paper() -> Self {
        Self::parse(PAPER_TOML).expect("shipped paper profile parses")
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file. `desk` and `paper` name the shipped
    /// profiles. A relative manifest path is resolved against the file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        match path.to_str() {
            Some("desk") => return Ok(Self::desk()),
            Some("paper") => return Ok(Self::paper()),
            _ => {}
        }
        let text = fs::read_to_string(path).map_err(|e| PipelineError::input_io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        self.stage_loss(self.loss.class_weights.unwrap_or([1.0; 3]))
            .validate()?;
        self.train.stage1().validate()?;
        if self.train.stage2_epochs > 0 {
            self.train.stage2().validate()?;
        }
        self.scene.validate()?;
        if self.model.merge_type != MergeType::SharedAvg && self.scene.num_channels != self.model.channels {
            return Err(PipelineError::Config(format!(
                "{} model expects {} channels but the scene renders {}",
                self.model.merge_type.label(),
                self.model.channels,
                self.scene.num_channels
            )));
        }
        Ok(())
    }

    /// Stage-one loss with the given class weights.
    pub fn stage_loss(&self, class_weights: [f64; 3]) -> LossConfig {
        LossConfig {
            label_smoothing: self.loss.label_smoothing,
            class_weights,
            cost_matrix: [[0.0; 3]; 3],
            lambda: self.loss.lambda,
            cs_enabled: false,
        }
    }
}

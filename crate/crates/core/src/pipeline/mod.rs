//! Configuration, manifests, synthetic scenes, checkpoints, and the
//! synth / train / eval / calibrate / infer commands.

mod checkpoint;
mod commands;
mod config;
mod manifest;
pub mod synth;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION, MAGIC};
pub use commands::*;
pub use config::{Config, DataSection, LossSection, SplitSection, TrainSection, DESK_TOML, PAPER_TOML};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{synth_scene, Scene, SceneSpec};

use crate::calibmetrics::MetricsError;
use crate::featext::FeatError;
use crate::labelgen::LabelError;
use crate::model::ModelError;
use crate::numcore::NumError;
use crate::trainloss::TrainError;

/// Exit status for bad inputs or violated contracts.
pub const EXIT_INPUT: i32 = 2;
/// Exit status for runtime and numeric failures.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
        input: bool,
    },
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<NumError> for PipelineError {
    fn from(e: NumError) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

impl PipelineError {
    /// Failure writing or reading a file the pipeline owns.
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
            input: false,
        }
    }

    /// Failure reading a file the user supplied.
    pub fn input_io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
            input: true,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use PipelineError::*;
        match self {
            Config(_) | Input(_) | Format(_) | Feat(_) | Label(_) | Metrics(_) => EXIT_INPUT,
            Io { input, .. } => {
                if *input {
                    EXIT_INPUT
                } else {
                    EXIT_RUNTIME
                }
            }
            Model(ModelError::Numeric { .. }) => EXIT_RUNTIME,
            Model(_) => EXIT_INPUT,
            Train(TrainError::Config(_) | TrainError::InvalidLabel(_) | TrainError::EmptyDataset) => EXIT_INPUT,
            Train(TrainError::Model(m)) if !matches!(m, ModelError::Numeric { .. }) => EXIT_INPUT,
            Train(_) => EXIT_RUNTIME,
            Runtime(_) => EXIT_RUNTIME,
        }
    }
}

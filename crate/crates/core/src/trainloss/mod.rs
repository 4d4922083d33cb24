//! Training objective and mini-batch Adam loop.
//!
//! Stage one trains with class-weighted, label-smoothed cross-entropy. The
//! caller then turns a validation confusion matrix into a cost matrix with
//! [`cost_matrix_from_confusion`] and runs stage two with the cost-sensitive
//! term switched on.

mod loss;

pub use loss::{
    ce_ls_weighted, confusion_cost, cost_matrix_from_confusion, cs_loss, objective_value,
    total_objective, CostMatrix, LossConfig,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featext::{Spectrogram, FREQ_BINS, SEGMENT_FRAMES};
use crate::labelgen::NUM_CLASSES;
use crate::model::{CsdModel, ModelError};
use crate::numcore::{softmax_slice, AdamConfig, AdamState, NumError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("label {0} is not a class in 0..3")]
    InvalidLabel(u8),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale optimizer settings.
    pub fn paper() -> Self {
        Self {
            lr: 1e-6,
            weight_decay: 1e-9,
            batch_size: 128,
            epochs: 10,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-9,
            batch_size: 16,
            epochs: 6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Labelled segments drawn from a set of spectrograms without copying each
/// overlapping window.
#[derive(Clone, Debug, Default)]
pub struct SegmentDataset {
    sources: Vec<Spectrogram>,
    items: Vec<(usize, usize)>,
    labels: Vec<u8>,
}

impl SegmentDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every segment of `spec` with its label. Extra labels or
    /// segments beyond the shorter of the two are ignored.
    pub fn add_recording(&mut self, spec: Spectrogram, labels: &[u8]) -> Result<(), TrainError> {
        if let Some(first) = self.sources.first() {
            if first.channels() != spec.channels() {
                return Err(TrainError::Config(format!(
                    "recording has {} channels, dataset has {}",
                    spec.channels(),
                    first.channels()
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(TrainError::InvalidLabel(bad));
        }
        let src = self.sources.len();
        let n = spec.num_segments().min(labels.len());
        self.sources.push(spec);
        for (i, &l) in labels.iter().take(n).enumerate() {
            self.items.push((src, i));
            self.labels.push(l);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.sources.first().map_or(0, Spectrogram::channels)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Input tensor `[indices.len(), channels, 257, 32]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let plane = self.channels() * FREQ_BINS * SEGMENT_FRAMES;
        let mut data = vec![0.0; indices.len() * plane];
        for (dst, &i) in data.chunks_mut(plane).zip(indices) {
            let (src, seg) = self.items[i];
            self.sources[src].write_segment(seg, dst);
        }
        Tensor::new(
            vec![indices.len(), self.channels(), FREQ_BINS, SEGMENT_FRAMES],
            data,
        )
        .expect("spectrogram values are finite")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch Adam over a seeded shuffle. A fresh optimizer state is used
/// for every call.
pub fn train(
    model: &mut CsdModel,
    data: &SegmentDataset,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<TrainLog, TrainError> {
    train_with_progress(model, data, tcfg, lcfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    model: &mut CsdModel,
    data: &SegmentDataset,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog, TrainError> {
    tcfg.validate()?;
    lcfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = AdamState::new(tcfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let input = data.batch(chunk);
            let labels = data.batch_labels(chunk);
            let mut tape = Tape::new();
            let w = model.bind(&mut tape)?;
            let logits = model.forward_batch(&mut tape, &w, &input)?;
            let loss = total_objective(&mut tape, logits, &labels, lcfg).map_err(|e| match e {
                TrainError::Numeric(NumError::NonFinite { .. }) => TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += value * chunk.len() as f64;
            correct += tape
                .value(logits)
                .data()
                .chunks(NUM_CLASSES)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y as usize)
                .count();

            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = w.iter().map(|v| grads.get_or_zeros(*v)).collect();
            adam.step(&mut model.weights_mut().tensors_mut(), &grads)?;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Logits for every dataset item, in dataset order.
pub fn predict_logits(
    model: &CsdModel,
    data: &SegmentDataset,
    batch_size: usize,
) -> Result<Vec<[f64; 3]>, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(model.logits(&data.batch(chunk))?);
    }
    Ok(out)
}

/// Softmax of `logits / temperature`.
pub fn probabilities(logits: &[f64; 3], temperature: f64) -> [f64; 3] {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let p = softmax_slice(&scaled);
    [p[0], p[1], p[2]]
}

pub fn argmax3(p: &[f64; 3]) -> u8 {
    argmax(p) as u8
}

//! Binary checkpoints.
//!
//! ```text
//! magic "CSDCKPT\0" | header length (u64 LE) | JSON header | f64 LE payload
//! ```
//!
//! The header carries the model and loss configuration, the stored
//! calibration, and a tensor directory listing each weight's name, shape and
//! byte offset into the payload. Tensors appear in the model's canonical
//! order with contiguous offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::calibmetrics::CalibrationResult;
use crate::model::{CsdModel, ModelConfig};
use crate::numcore::Tensor;
use crate::trainloss::LossConfig;

pub const MAGIC: &[u8; 8] = b"CSDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Training stage that produced the weights.
    pub stage: u8,
    pub calibration: Option<CalibrationResult>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CsdModel,
    pub loss: LossConfig,
    pub stage: u8,
    pub calibration: Option<CalibrationResult>,
}

impl Checkpoint {
    pub fn temperature(&self) -> f64 {
        self.calibration.map_or(1.0, |c| c.temperature)
    }

    pub fn tau(&self) -> f64 {
        self.calibration.map_or(0.0, |c| c.tau)
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0u64;
        let tensors = self
            .model
            .weights()
            .named()
            .into_iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            loss: self.loss.clone(),
            stage: self.stage,
            calibration: self.calibration,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let payload_len: usize = self.model.weights().iter().map(|t| 8 * t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.weights().iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let bad = |m: String| PipelineError::Format(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint: bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &body[hlen..];

        let template = CsdModel::new(header.model.clone(), 0).map_err(|e| bad(e.to_string()))?;
        let expected = template.weights().named();
        if expected.len() != header.tensors.len() {
            return Err(bad(format!(
                "directory lists {} tensors, configuration needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(expected.len());
        for ((name, t), entry) in expected.iter().zip(&header.tensors) {
            if &entry.name != name || entry.shape != t.shape() {
                return Err(bad(format!(
                    "tensor {:?} {:?} does not match expected {:?} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    t.shape()
                )));
            }
            if entry.offset != offset {
                return Err(bad(format!("tensor {name} offset {} is not contiguous", entry.offset)));
            }
            let n = t.len();
            let start = offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(bad(format!("payload truncated inside {name}")));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data).map_err(|e| bad(format!("{name}: {e}")))?);
            offset = end as u64;
        }
        if offset as usize != payload.len() {
            return Err(bad(format!(
                "payload has {} bytes, directory covers {offset}",
                payload.len()
            )));
        }
        let weights = template.weights().from_ordered(tensors).expect("count checked");
        let model = CsdModel::from_weights(header.model, weights).map_err(|e| bad(e.to_string()))?;
        header.loss.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            model,
            loss: header.loss,
            stage: header.stage,
            calibration: header.calibration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_bytes()).map_err(|e| PipelineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path).map_err(|e| PipelineError::input_io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

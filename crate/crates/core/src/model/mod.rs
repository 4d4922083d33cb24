//! Transformer classifier over log-spectrum patches.
//!
//! Each channel's `257 × 32` log-spectrum is cut into full-frequency patches
//! that slide along time, normalized, projected to `embed_dim`, normalized
//! again, and merged across channels according to [`MergeType`]. A class
//! token and learned positional table are added before a stack of pre-LN
//! encoder layers; the class token's final state feeds a two-layer head.

mod config;
mod weights;

pub use config::{count_parameters, embedding_parameters, patch_count, MergeType, ModelConfig};
pub use weights::{EncoderLayer, PatchEmbedding, Weights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::featext::{SegmentTensor, FREQ_BINS, SEGMENT_FRAMES};
use crate::numcore::{softmax_slice, NumError, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{} model expects {expected} channels, input has {found}", merge.label())]
    ChannelMismatch {
        merge: MergeType,
        expected: usize,
        found: usize,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric failure in {stage}: {source}")]
    Numeric { stage: String, source: NumError },
}

fn at_stage(stage: impl Into<String>) -> impl FnOnce(NumError) -> ModelError {
    let stage = stage.into();
    move |source| ModelError::Numeric { stage, source }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsdModel {
    config: ModelConfig,
    weights: Weights<Tensor>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Layer-norm scale and offset.
fn norm_pair(d: usize) -> (Tensor, Tensor) {
    (Tensor::ones(&[d]), Tensor::zeros(&[d]))
}

/// Expected shape of every weight, in canonical order.
fn weight_shapes(cfg: &ModelConfig) -> Result<Weights<Vec<usize>>, ModelError> {
    let d = cfg.embed_dim;
    let k = cfg.patch_dim();
    let h = cfg.mlp_ratio * d;
    let embedding = PatchEmbedding {
        pre_gamma: vec![k],
        pre_beta: vec![k],
        proj_w: vec![k, d],
        proj_b: vec![d],
        post_gamma: vec![d],
        post_beta: vec![d],
    };
    let layer = EncoderLayer {
        ln1_gamma: vec![d],
        ln1_beta: vec![d],
        qkv_w: vec![d, 3 * d],
        qkv_b: vec![3 * d],
        out_w: vec![d, d],
        out_b: vec![d],
        ln2_gamma: vec![d],
        ln2_beta: vec![d],
        mlp_in_w: vec![d, h],
        mlp_in_b: vec![h],
        mlp_out_w: vec![h, d],
        mlp_out_b: vec![d],
    };
    Ok(Weights {
        embeddings: vec![embedding; cfg.num_embeddings()],
        cls_token: vec![d],
        pos_embedding: vec![cfg.tokens()? + 1, d],
        layers: vec![layer; cfg.depth],
        final_gamma: vec![d],
        final_beta: vec![d],
        head_hidden_w: vec![d, cfg.classifier_hidden],
        head_hidden_b: vec![cfg.classifier_hidden],
        head_out_w: vec![cfg.classifier_hidden, cfg.num_classes],
        head_out_b: vec![cfg.num_classes],
    })
}

impl CsdModel {
    /// Randomly initialized model: truncated normal (std 0.02) for
    /// projections and embeddings, zero biases, unit norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = weight_shapes(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = shapes.map(|name, shape| {
            let is_norm = name.contains("norm") || name.contains(".ln");
            if is_norm && name.ends_with("gamma") {
                norm_pair(shape[0]).0
            } else if is_norm || name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                trunc_normal(&mut rng, shape)
            }
        });
        Ok(Self { config, weights })
    }

    /// Wraps existing weights after checking every shape against `config`.
    pub fn from_weights(config: ModelConfig, weights: Weights<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = weight_shapes(&config)?;
        if shapes.embeddings.len() != weights.embeddings.len()
            || shapes.layers.len() != weights.layers.len()
        {
            return Err(ModelError::Config("weight layout does not match configuration".into()));
        }
        for ((name, want), got) in shapes.named().into_iter().zip(weights.iter()) {
            if want.as_slice() != got.shape() {
                return Err(ModelError::Config(format!(
                    "{name}: expected shape {want:?}, found {:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        &mut self.weights
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Records every weight on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Weights<Var>, ModelError> {
        self.weights
            .try_map(&mut |_, t| tape.param(t))
            .map_err(at_stage("parameter binding"))
    }

    /// Records every weight as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Weights<Var>, ModelError> {
        self.weights
            .try_map(&mut |_, t| tape.constant(t.clone()))
            .map_err(at_stage("parameter binding"))
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize), ModelError> {
        let s = input.shape();
        if s.len() != 4 || s[2] != FREQ_BINS || s[3] != SEGMENT_FRAMES {
            return Err(ModelError::Input(format!(
                "expected [batch, channels, {FREQ_BINS}, {SEGMENT_FRAMES}], got {s:?}"
            )));
        }
        let (batch, channels) = (s[0], s[1]);
        if self.config.merge_type.binds_channel_count() && channels != self.config.channels {
            return Err(ModelError::ChannelMismatch {
                merge: self.config.merge_type,
                expected: self.config.channels,
                found: channels,
            });
        }
        Ok((batch, channels))
    }

    /// Flattened time patches `[batch, channels, P, 257·patch_time]` for the
    /// channels in `range`; element order within a patch is (freq, time).
    fn extract_patches(
        &self,
        input: &Tensor,
        channels: usize,
        range: std::ops::Range<usize>,
    ) -> Tensor {
        let cfg = &self.config;
        let batch = input.shape()[0];
        let p = patch_count(cfg).expect("validated config");
        let k = cfg.patch_dim();
        let width = range.len();
        let src = input.data();
        let mut out = Vec::with_capacity(batch * width * p * k);
        for b in 0..batch {
            for c in range.clone() {
                let plane = &src[(b * channels + c) * FREQ_BINS * SEGMENT_FRAMES..];
                for pi in 0..p {
                    let t0 = pi * cfg.time_stride;
                    for f in 0..FREQ_BINS {
                        let row = &plane[f * SEGMENT_FRAMES + t0..];
                        out.extend_from_slice(&row[..cfg.patch_time]);
                    }
                }
            }
        }
        Tensor::new(vec![batch, width, p, k], out).expect("finite input")
    }

    fn embed_patches(
        tape: &mut Tape,
        e: &PatchEmbedding<Var>,
        patches: Var,
    ) -> Result<Var, NumError> {
        let h = tape.layer_norm(patches, e.pre_gamma, e.pre_beta)?;
        let h = tape.matmul(h, e.proj_w)?;
        let h = tape.add_broadcast(h, e.proj_b)?;
        tape.layer_norm(h, e.post_gamma, e.post_beta)
    }

    /// Merged patch tokens `[batch, tokens, D]`.
    fn embed_tokens(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        input: &Tensor,
    ) -> Result<Var, ModelError> {
        let (batch, channels) = self.check_input(input)?;
        let cfg = &self.config;
        let p = patch_count(cfg)?;
        let k = cfg.patch_dim();
        let d = cfg.embed_dim;
        let stage = || at_stage("embedding");
        match cfg.merge_type {
            MergeType::Concat | MergeType::Sum => {
                let mut blocks = Vec::with_capacity(channels);
                for c in 0..channels {
                    let patches = self
                        .extract_patches(input, channels, c..c + 1)
                        .reshape(&[batch, p, k])
                        .map_err(stage())?;
                    let x = tape.constant(patches).map_err(stage())?;
                    blocks.push(Self::embed_patches(tape, &w.embeddings[c], x).map_err(stage())?);
                }
                if cfg.merge_type == MergeType::Concat {
                    tape.concat(&blocks, 1).map_err(stage())
                } else {
                    let mut acc = blocks[0];
                    for &b in &blocks[1..] {
                        acc = tape.add(acc, b).map_err(stage())?;
                    }
                    Ok(acc)
                }
            }
            MergeType::SharedAvg => {
                let patches = self.extract_patches(input, channels, 0..channels);
                let x = tape.constant(patches).map_err(stage())?;
                let tokens = Self::embed_patches(tape, &w.embeddings[0], x).map_err(stage())?;
                let summed = tape.sum_axis(tokens, 1).map_err(stage())?;
                let mean = tape.scale(summed, 1.0 / channels as f64).map_err(stage())?;
                debug_assert_eq!(tape.shape(mean), &[batch, p, d]);
                Ok(mean)
            }
        }
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        l: &EncoderLayer<Var>,
        x: Var,
        attention: Option<&mut Vec<Var>>,
    ) -> Result<Var, NumError> {
        let cfg = &self.config;
        let s = tape.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (cfg.heads, cfg.head_dim());

        let n1 = tape.layer_norm(x, l.ln1_gamma, l.ln1_beta)?;
        let qkv = tape.matmul(n1, l.qkv_w)?;
        let qkv = tape.add_broadcast(qkv, l.qkv_b)?;
        let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [x; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let v = tape.narrow(qkv, 0, i, 1)?;
            *part = tape.reshape(v, &[b * h, t, dh])?;
        }
        let [q, k, v] = parts;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores, 2)?;
        if let Some(out) = attention {
            out.push(attn);
        }
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let proj = tape.matmul(ctx, l.out_w)?;
        let proj = tape.add_broadcast(proj, l.out_b)?;
        let x = tape.add(x, proj)?;

        let n2 = tape.layer_norm(x, l.ln2_gamma, l.ln2_beta)?;
        let hid = tape.matmul(n2, l.mlp_in_w)?;
        let hid = tape.add_broadcast(hid, l.mlp_in_b)?;
        let hid = tape.gelu(hid)?;
        let out = tape.matmul(hid, l.mlp_out_w)?;
        let out = tape.add_broadcast(out, l.mlp_out_b)?;
        tape.add(x, out)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        input: &Tensor,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let tokens = self.embed_tokens(tape, w, input)?;
        let batch = input.shape()[0];
        let t = tape.shape(tokens)[1];

        let x = {
            let stage = || at_stage("class token");
            let index: Vec<usize> = (0..batch).flat_map(|_| 0..d).collect();
            let cls = tape.gather(w.cls_token, index, &[batch, 1, d]).map_err(stage())?;
            let x = tape.concat(&[cls, tokens], 1).map_err(stage())?;
            tape.add_broadcast(x, w.pos_embedding).map_err(stage())?
        };
        debug_assert_eq!(tape.shape(x), &[batch, t + 1, d]);

        let mut x = x;
        for (i, layer) in w.layers.iter().enumerate() {
            x = self
                .encoder_layer(tape, layer, x, attention.as_deref_mut())
                .map_err(at_stage(format!("encoder layer {i}")))?;
        }

        let stage = || at_stage("classification head");
        let x = tape.layer_norm(x, w.final_gamma, w.final_beta).map_err(stage())?;
        let cls = tape.narrow(x, 1, 0, 1).map_err(stage())?;
        let cls = tape.reshape(cls, &[batch, d]).map_err(stage())?;
        let h = tape.matmul(cls, w.head_hidden_w).map_err(stage())?;
        let h = tape.add_broadcast(h, w.head_hidden_b).map_err(stage())?;
        let h = tape.gelu(h).map_err(stage())?;
        let logits = tape.matmul(h, w.head_out_w).map_err(stage())?;
        tape.add_broadcast(logits, w.head_out_b).map_err(stage())
    }

    /// Logits `[batch, 3]` for `input` of shape `[batch, channels, 257, 32]`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        input: &Tensor,
    ) -> Result<Var, ModelError> {
        self.forward_impl(tape, w, input, None)
    }

    /// Like [`CsdModel::forward_batch`], also returning each layer's
    /// attention probabilities `[batch·heads, T+1, T+1]`.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        input: &Tensor,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let mut attention = Vec::new();
        let logits = self.forward_impl(tape, w, input, Some(&mut attention))?;
        Ok((logits, attention))
    }

    /// Raw logits per sample, without gradient tracking.
    pub fn logits(&self, input: &Tensor) -> Result<Vec<[f64; 3]>, ModelError> {
        let mut tape = Tape::new();
        let w = self.bind_frozen(&mut tape)?;
        let out = self.forward_batch(&mut tape, &w, input)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    /// Logits for a single segment.
    pub fn forward(&self, x: &SegmentTensor) -> Result<[f64; 3], ModelError> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.data.shape());
        let input = x.data.clone().reshape(&shape).map_err(at_stage("input"))?;
        Ok(self.logits(&input)?[0])
    }

    pub fn probabilities(&self, x: &SegmentTensor) -> Result<[f64; 3], ModelError> {
        let p = softmax_slice(&self.forward(x)?);
        Ok([p[0], p[1], p[2]])
    }

    /// Merged patch tokens `[tokens, D]` for one segment.
    pub fn embed(&self, x: &SegmentTensor) -> Result<Tensor, ModelError> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.data.shape());
        let input = x.data.clone().reshape(&shape).map_err(at_stage("input"))?;
        let mut tape = Tape::new();
        let w = self.bind_frozen(&mut tape)?;
        let tokens = self.embed_tokens(&mut tape, &w, &input)?;
        let s = tape.shape(tokens).to_vec();
        tape.value(tokens)
            .clone()
            .reshape(&[s[1], s[2]])
            .map_err(at_stage("embedding"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(merge: MergeType, channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            patch_freq: FREQ_BINS,
            patch_time: 8,
            time_stride: 4,
            classifier_hidden: 6,
            num_classes: 3,
            merge_type: merge,
        }
    }

    #[test]
    fn built_model_matches_formula_count() {
        for merge in [MergeType::Concat, MergeType::Sum, MergeType::SharedAvg] {
            for n in 1..=3 {
                let cfg = tiny(merge, n);
                let m = CsdModel::new(cfg.clone(), 0).unwrap();
                assert_eq!(m.num_parameters(), count_parameters(&cfg).unwrap());
            }
        }
    }

    #[test]
    fn canonical_orders_agree() {
        let mut m = CsdModel::new(tiny(MergeType::Concat, 2), 0).unwrap();
        let shapes: Vec<Vec<usize>> = m.weights().iter().map(|t| t.shape().to_vec()).collect();
        let named: Vec<Vec<usize>> = m
            .weights()
            .named()
            .into_iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let muts: Vec<Vec<usize>> = m
            .weights_mut()
            .tensors_mut()
            .into_iter()
            .map(|t| t.shape().to_vec())
            .collect();
        assert_eq!(shapes, named);
        assert_eq!(shapes, muts);
        let names: Vec<String> = m.weights().named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embed.0.pre_norm.gamma");
        assert!(names.contains(&"layers.0.attn.qkv.weight".to_string()));
    }

    #[test]
    fn from_weights_rejects_wrong_shapes() {
        let m = CsdModel::new(tiny(MergeType::Concat, 2), 0).unwrap();
        let mut w = m.weights().clone();
        w.cls_token = Tensor::zeros(&[7]);
        assert!(CsdModel::from_weights(m.config().clone(), w).is_err());
        assert!(CsdModel::from_weights(m.config().clone(), m.weights().clone()).is_ok());
    }

    #[test]
    fn init_uses_documented_scheme() {
        let m = CsdModel::new(tiny(MergeType::Sum, 1), 3).unwrap();
        let w = m.weights();
        assert!(w.embeddings[0].pre_gamma.data().iter().all(|&v| v == 1.0));
        assert!(w.embeddings[0].proj_b.data().iter().all(|&v| v == 0.0));
        assert!(w.layers[0].ln2_beta.data().iter().all(|&v| v == 0.0));
        assert!(w.head_out_w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(w.pos_embedding.data().iter().any(|&v| v != 0.0));
    }
}

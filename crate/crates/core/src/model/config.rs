use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::featext::{FREQ_BINS, SEGMENT_FRAMES};

/// How per-channel patch tokens are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeType {
    /// Type #1: a separate embedding per channel; token blocks are
    /// concatenated, giving `N·P` tokens.
    Concat,
    /// Type #2: a separate embedding per channel; token blocks are summed.
    Sum,
    /// Type #3: one shared embedding; token blocks are averaged.
    SharedAvg,
}

impl MergeType {
    pub fn label(self) -> &'static str {
        match self {
            MergeType::Concat => "Type #1 (concat)",
            MergeType::Sum => "Type #2 (sum)",
            MergeType::SharedAvg => "Type #3 (shared average)",
        }
    }

    /// Types #1 and #2 hold one embedding per channel, which binds the
    /// channel count.
    pub fn binds_channel_count(self) -> bool {
        !matches!(self, MergeType::SharedAvg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_freq: usize,
    pub patch_time: usize,
    pub time_stride: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
    pub merge_type: MergeType,
}

impl ModelConfig {
    /// Full-size configuration: D=768, 12 layers of 12 heads, 257×8 patches.
    pub fn paper(merge_type: MergeType, channels: usize) -> Self {
        Self {
            channels,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            patch_freq: FREQ_BINS,
            patch_time: 8,
            time_stride: 1,
            classifier_hidden: 387,
            num_classes: 3,
            merge_type,
        }
    }

    /// Laptop-scale configuration used for synthetic runs.
    pub fn desk() -> Self {
        Self {
            channels: 2,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            patch_freq: FREQ_BINS,
            patch_time: 8,
            time_stride: 1,
            classifier_hidden: 32,
            num_classes: 3,
            merge_type: MergeType::Concat,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.classifier_hidden == 0 {
            return fail("depth, mlp_ratio and classifier_hidden must be positive".into());
        }
        if self.num_classes != 3 {
            return fail(format!("num_classes must be 3, got {}", self.num_classes));
        }
        if self.patch_freq != FREQ_BINS {
            return fail(format!(
                "patch_freq must cover all {FREQ_BINS} frequency bins, got {}",
                self.patch_freq
            ));
        }
        if self.patch_time == 0 || self.patch_time > SEGMENT_FRAMES {
            return fail(format!(
                "patch_time must be in 1..={SEGMENT_FRAMES}, got {}",
                self.patch_time
            ));
        }
        if self.time_stride == 0 {
            return fail("time_stride must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_freq * self.patch_time
    }

    /// Transformer tokens before the class token is prepended.
    pub fn tokens(&self) -> Result<usize, ModelError> {
        let p = patch_count(self)?;
        Ok(match self.merge_type {
            MergeType::Concat => self.channels * p,
            MergeType::Sum | MergeType::SharedAvg => p,
        })
    }

    pub fn num_embeddings(&self) -> usize {
        match self.merge_type {
            MergeType::Concat | MergeType::Sum => self.channels,
            MergeType::SharedAvg => 1,
        }
    }
}

/// Patches per channel. The kernel spans every frequency bin, so patches
/// only slide along time.
pub fn patch_count(cfg: &ModelConfig) -> Result<usize, ModelError> {
    if cfg.patch_time == 0 || cfg.patch_time > SEGMENT_FRAMES {
        return Err(ModelError::Config(format!(
            "patch_time {} exceeds the {SEGMENT_FRAMES}-frame segment",
            cfg.patch_time
        )));
    }
    if cfg.time_stride == 0 {
        return Err(ModelError::Config("time_stride must be positive".into()));
    }
    Ok((SEGMENT_FRAMES - cfg.patch_time) / cfg.time_stride + 1)
}

/// Learnable scalars in one patch embedding: pre-norm, projection, post-norm.
pub fn embedding_parameters(cfg: &ModelConfig) -> usize {
    let k = cfg.patch_dim();
    let d = cfg.embed_dim;
    2 * k + (k * d + d) + 2 * d
}

/// Exact learnable-scalar count, computed from the configuration alone.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_ratio * d;
    let embeddings = cfg.num_embeddings() * embedding_parameters(cfg);
    let cls = d;
    let pos = (cfg.tokens()? + 1) * d;
    let layer = 2 * d // ln1
        + d * 3 * d + 3 * d // qkv
        + d * d + d // output projection
        + 2 * d // ln2
        + d * hidden + hidden // mlp in
        + hidden * d + d; // mlp out
    let final_norm = 2 * d;
    let head = d * cfg.classifier_hidden
        + cfg.classifier_hidden
        + cfg.classifier_hidden * cfg.num_classes
        + cfg.num_classes;
    Ok(embeddings + cls + pos + cfg.depth * layer + final_norm + head)
}

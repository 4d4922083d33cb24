use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::labelgen::NUM_CLASSES;
use crate::numcore::{Tape, Tensor, Var};

pub type CostMatrix = [[f64; NUM_CLASSES]; NUM_CLASSES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub class_weights: [f64; NUM_CLASSES],
    pub cost_matrix: CostMatrix,
    /// Weight of the cost-sensitive term relative to cross-entropy.
    pub lambda: f64,
    pub cs_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            class_weights: [1.0; NUM_CLASSES],
            cost_matrix: [[0.0; NUM_CLASSES]; NUM_CLASSES],
            lambda: 15.0,
            cs_enabled: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad(format!("class weights must be positive: {:?}", self.class_weights));
        }
        validate_cost_matrix(&self.cost_matrix)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

fn validate_cost_matrix(c: &CostMatrix) -> Result<(), TrainError> {
    for (i, row) in c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("cost[{i}][{j}] = {v} is negative")));
            }
            if i == j && v != 0.0 {
                return Err(TrainError::Config(format!("cost[{i}][{i}] must be zero, got {v}")));
            }
        }
    }
    Ok(())
}

fn check_labels(labels: &[u8], rows: usize) -> Result<(), TrainError> {
    if labels.len() != rows {
        return Err(TrainError::Config(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(TrainError::InvalidLabel(bad));
    }
    Ok(())
}

fn batch_rows(tape: &Tape, logits: Var) -> Result<usize, TrainError> {
    match tape.shape(logits) {
        [rows, c] if *c == NUM_CLASSES => Ok(*rows),
        other => Err(TrainError::Config(format!(
            "logits must be [batch, {NUM_CLASSES}], got {other:?}"
        ))),
    }
}

/// Class-weighted cross-entropy against label-smoothed targets, averaged over
/// the batch: `−(1/B)·Σ_i w[y_i]·Σ_c q_ic·log p_ic` with
/// `q_i = (1−ε)·onehot(y_i) + ε/3`.
pub fn ce_ls_weighted(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<Var, TrainError> {
    let rows = batch_rows(tape, logits)?;
    check_labels(labels, rows)?;
    let eps = cfg.label_smoothing;
    let mut target = Vec::with_capacity(rows * NUM_CLASSES);
    for &y in labels {
        let w = cfg.class_weights[y as usize];
        for c in 0..NUM_CLASSES {
            let q = eps / NUM_CLASSES as f64 + if c == y as usize { 1.0 - eps } else { 0.0 };
            target.push(-w * q / rows as f64);
        }
    }
    let logp = tape.log_softmax(logits, 1)?;
    let t = tape.constant(Tensor::new(vec![rows, NUM_CLASSES], target)?)?;
    let prod = tape.mul(logp, t)?;
    Ok(tape.sum(prod)?)
}

/// Expected misclassification cost `(1/B)·Σ_i Σ_j p_ij·C[y_i][j]`.
pub fn cs_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    cost: &CostMatrix,
) -> Result<Var, TrainError> {
    validate_cost_matrix(cost)?;
    let rows = batch_rows(tape, logits)?;
    check_labels(labels, rows)?;
    let weights: Vec<f64> = labels
        .iter()
        .flat_map(|&y| cost[y as usize].iter().map(move |c| c / rows as f64))
        .collect();
    let p = tape.softmax(logits, 1)?;
    let w = tape.constant(Tensor::new(vec![rows, NUM_CLASSES], weights)?)?;
    let prod = tape.mul(p, w)?;
    Ok(tape.sum(prod)?)
}

/// Cross-entropy term plus `λ·cs_loss` when the cost-sensitive stage is on.
pub fn total_objective(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<Var, TrainError> {
    let ce = ce_ls_weighted(tape, logits, labels, cfg)?;
    if !cfg.cs_enabled || cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let cs = cs_loss(tape, logits, labels, &cfg.cost_matrix)?;
    let cs = tape.scale(cs, cfg.lambda)?;
    Ok(tape.add(ce, cs)?)
}

/// Objective value for plain logit rows.
pub fn objective_value(logits: &[[f64; 3]], labels: &[u8], cfg: &LossConfig) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let flat: Vec<f64> = logits.iter().flatten().copied().collect();
    let l = tape.constant(Tensor::new(vec![logits.len(), NUM_CLASSES], flat)?)?;
    let v = total_objective(&mut tape, l, labels, cfg)?;
    Ok(tape.value(v).item())
}

/// Stage-two cost matrix from a stage-one confusion matrix given in percent
/// of each true class: off-diagonal error rates, each row scaled so its
/// largest entry is 1. Rows without errors stay zero.
pub fn cost_matrix_from_confusion(confusion: &CostMatrix) -> CostMatrix {
    let mut c = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        for j in 0..NUM_CLASSES {
            if i != j {
                c[i][j] = confusion[i][j].max(0.0) / 100.0;
            }
        }
        let max = c[i].iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut c[i] {
                *v /= max;
            }
        }
    }
    if c.iter().flatten().all(|&v| v == 0.0) {
        log::warn!("confusion matrix has no off-diagonal mass; cost-sensitive stage is a no-op");
    }
    c
}

/// `Σ_ij confusion[i][j]·C[i][j]`, the quantity the cost-sensitive stage
/// pushes down.
pub fn confusion_cost(confusion: &CostMatrix, cost: &CostMatrix) -> f64 {
    confusion
        .iter()
        .flatten()
        .zip(cost.iter().flatten())
        .map(|(a, b)| a * b)
        .sum()
}

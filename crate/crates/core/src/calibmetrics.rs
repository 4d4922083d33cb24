//! Temperature scaling and the evaluation suite: precision, recall,
//! step-wise average precision, ground-truth-normalized confusion matrices,
//! and the VAD / OSD reductions of the three-class output.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelgen::NUM_CLASSES;
use crate::numcore::softmax_slice;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
pub const T_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("average precision is undefined without positive labels")]
    NoPositives,
    #[error("class {0} never occurs in the ground truth; recall is undefined")]
    ClassAbsent(u8),
    #[error("{pred} predictions for {truth} ground-truth labels")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label {0} is out of range")]
    InvalidLabel(u8),
    #[error("no samples")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// Confidence threshold of the decision policy; 0 disables it.
    pub tau: f64,
}

/// Mean negative log-likelihood of `softmax(logits / t)`.
pub fn nll_at(logits: &[[f64; 3]], labels: &[u8], t: f64) -> f64 {
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        let z = l.map(|v| v / t);
        let top = argmax(&z);
        // ln_1p keeps precision when the true class dominates.
        let rest: f64 = (0..3).filter(|&j| j != top).map(|j| (z[j] - z[top]).exp()).sum();
        total += (z[top] - z[y as usize]) + rest.ln_1p();
    }
    total / logits.len() as f64
}

/// Fits a single temperature by golden-section search on `[0.05, 20]`.
/// Falls back to T = 1 if the search lands somewhere worse, so the
/// validation NLL never increases.
pub fn fit_temperature(logits: &[[f64; 3]], labels: &[u8]) -> Result<CalibrationResult, MetricsError> {
    check_pair(logits.len(), labels.len())?;
    check_labels(labels, NUM_CLASSES)?;
    let f = |t: f64| nll_at(logits, labels, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN, T_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > T_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut t = 0.5 * (a + b);
    let before = f(1.0);
    let mut after = f(t);
    if !(after <= before) {
        t = 1.0;
        after = before;
    }
    Ok(CalibrationResult {
        temperature: t,
        nll_before: before,
        nll_after: after,
        tau: 0.0,
    })
}

pub fn calibrated_probs(logits: &[f64; 3], temperature: f64) -> [f64; 3] {
    let p = softmax_slice(&logits.map(|v| v / temperature));
    [p[0], p[1], p[2]]
}

/// Argmax, except that low-confidence decisions are sent to the overlap
/// class.
pub fn apply_policy(probs: &[f64; 3], tau: f64) -> u8 {
    let c = argmax(probs);
    if probs[c] < tau {
        2
    } else {
        c as u8
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Three-class concurrent speaker detection.
    #[serde(rename = "CSD")]
    Csd,
    /// Speech (classes 1 and 2) against noise only.
    #[serde(rename = "VAD")]
    Vad,
    /// Overlap (class 2) against everything else.
    #[serde(rename = "OSD")]
    Osd,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Csd => "CSD",
            Task::Vad => "VAD",
            Task::Osd => "OSD",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Csd => 3,
            Task::Vad | Task::Osd => 2,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Csd => &["noise", "single", "overlap"],
            Task::Vad => &["non-speech", "speech"],
            Task::Osd => &["non-overlap", "overlap"],
        }
    }

    /// Maps a three-class label to this task's label space.
    pub fn reduce_label(self, y: u8) -> u8 {
        match self {
            Task::Csd => y,
            Task::Vad => u8::from(y != 0),
            Task::Osd => u8::from(y == 2),
        }
    }

    /// Positive-class score of a three-class probability vector. For CSD the
    /// vector is returned as is.
    pub fn reduce_probs(self, p: &[f64; 3]) -> Vec<f64> {
        match self {
            Task::Csd => p.to_vec(),
            Task::Vad => vec![p[0], p[1] + p[2]],
            Task::Osd => vec![p[0] + p[1], p[2]],
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csd" => Ok(Task::Csd),
            "vad" => Ok(Task::Vad),
            "osd" => Ok(Task::Osd),
            other => Err(format!("unknown task {other:?}; expected csd, vad or osd")),
        }
    }
}

/// Binary scores and labels for the positive class of a reduced task.
pub fn reduce_to_task(probs: &[[f64; 3]], labels: &[u8], task: Task) -> (Vec<f64>, Vec<bool>) {
    let positive = match task {
        Task::Csd => 2,
        _ => 1,
    };
    let scores = probs.iter().map(|p| task.reduce_probs(p)[positive]).collect();
    let labels = labels
        .iter()
        .map(|&y| task.reduce_label(y) as usize == positive)
        .collect();
    (scores, labels)
}

/// Step-wise average precision: `Σ (R_n − R_{n−1})·P_n` over thresholds at
/// each distinct score, highest first. Tied scores enter together.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_pair(scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Rows normalized to percent of each ground-truth class. Rows of classes
/// absent from the truth are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<Option<Vec<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    /// Dense 3×3 view with absent rows as zeros.
    pub fn to_dense3(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in self.rows.iter().enumerate().take(3) {
            if let Some(r) = row {
                for (j, v) in r.iter().enumerate().take(3) {
                    out[i][j] = *v;
                }
            }
        }
        out
    }
}

pub fn confusion_matrix(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    check_pair(pred.len(), truth.len())?;
    check_labels(pred, num_classes)?;
    check_labels(truth, num_classes)?;
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t as usize][p as usize] += 1;
    }
    let rows = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row.iter().map(|&c| 100.0 * c as f64 / n as f64).collect())
        })
        .collect();
    Ok(ConfusionMatrix { rows, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Set when the class was never predicted and precision defaulted to 0.
    pub no_predictions: bool,
}

pub fn precision_recall(pred: &[u8], truth: &[u8], class: u8) -> Result<PrecisionRecall, MetricsError> {
    check_pair(pred.len(), truth.len())?;
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut actual = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        tp += usize::from(p == class && t == class);
        predicted += usize::from(p == class);
        actual += usize::from(t == class);
    }
    if actual == 0 {
        return Err(MetricsError::ClassAbsent(class));
    }
    let no_predictions = predicted == 0;
    if no_predictions {
        log::warn!("class {class} is never predicted; precision reported as 0");
    }
    Ok(PrecisionRecall {
        precision: if no_predictions { 0.0 } else { tp as f64 / predicted as f64 },
        recall: tp as f64 / actual as f64,
        no_predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub samples: usize,
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
    /// For CSD the macro mean of one-vs-rest APs over classes present in the
    /// truth; for VAD and OSD the AP of the positive class.
    pub map: Option<f64>,
    pub confusion: ConfusionMatrix,
}

/// Scores a set of three-class probabilities against three-class labels,
/// after reducing both to `task`. Hard decisions use [`apply_policy`].
pub fn evaluate(probs: &[[f64; 3]], truth: &[u8], task: Task, tau: f64) -> Result<MetricsReport, MetricsError> {
    check_pair(probs.len(), truth.len())?;
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_labels(truth, NUM_CLASSES)?;
    let k = task.num_classes();
    let pred: Vec<u8> = probs
        .iter()
        .map(|p| task.reduce_label(apply_policy(p, tau)))
        .collect();
    let y: Vec<u8> = truth.iter().map(|&t| task.reduce_label(t)).collect();
    let scores: Vec<Vec<f64>> = probs.iter().map(|p| task.reduce_probs(p)).collect();

    let mut classes = Vec::with_capacity(k);
    for (c, name) in task.class_names().iter().enumerate() {
        let pr = precision_recall(&pred, &y, c as u8).ok();
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = y.iter().map(|&t| t as usize == c).collect();
        classes.push(ClassMetrics {
            name: name.to_string(),
            precision: pr.map(|m| m.precision),
            recall: pr.map(|m| m.recall),
            ap: average_precision(&col, &pos).ok(),
        });
    }
    let map = match task {
        Task::Csd => {
            let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
            (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
        }
        Task::Vad | Task::Osd => classes[1].ap,
    };
    let correct = pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    Ok(MetricsReport {
        task,
        samples: probs.len(),
        accuracy: correct as f64 / probs.len() as f64,
        classes,
        map,
        confusion: confusion_matrix(&pred, &y, k)?,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.task.class_names();
        let w = names.iter().map(|n| n.len()).max().unwrap_or(0).max(9);
        writeln!(f, "{} ({} segments)", self.task.name(), self.samples)?;
        writeln!(f, "accuracy {:.1}%", 100.0 * self.accuracy)?;
        let map_label = if self.task == Task::Csd { "mAP (macro)" } else { "mAP" };
        writeln!(f, "{map_label} {}%", pct(self.map))?;
        writeln!(f)?;
        writeln!(f, "{:<w$} {:>9} {:>9} {:>9}", "class", "precision", "recall", "AP")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<w$} {:>9} {:>9} {:>9}",
                c.name,
                pct(c.precision),
                pct(c.recall),
                pct(c.ap)
            )?;
        }
        writeln!(f)?;
        write!(f, "{:<w$}", "true \\ pred")?;
        for n in names {
            write!(f, " {:>w$}", n)?;
        }
        writeln!(f)?;
        for (n, row) in names.iter().zip(&self.confusion.rows) {
            write!(f, "{:<w$}", n)?;
            match row {
                Some(r) => {
                    for v in r {
                        write!(f, " {:>w$.1}", v)?;
                    }
                }
                None => {
                    for _ in names.iter() {
                        write!(f, " {:>w$}", "n/a")?;
                    }
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn check_pair(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch { pred: a, truth: b });
    }
    Ok(())
}

fn check_labels(labels: &[u8], k: usize) -> Result<(), MetricsError> {
    match labels.iter().find(|&&l| l as usize >= k) {
        Some(&bad) => Err(MetricsError::InvalidLabel(bad)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_examples() {
        assert_eq!(apply_policy(&[0.4, 0.35, 0.25], 0.0), 0);
        assert_eq!(apply_policy(&[0.4, 0.35, 0.25], 0.5), 2);
        assert_eq!(apply_policy(&[0.1, 0.1, 0.8], 0.5), 2);
        assert_eq!(apply_policy(&[0.1, 0.7, 0.2], 0.5), 1);
    }

    #[test]
    fn reductions() {
        let (s, l) = reduce_to_task(&[[0.5, 0.3, 0.2]], &[1], Task::Vad);
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert_eq!(l, vec![true]);
        let (s, l) = reduce_to_task(&[[0.5, 0.3, 0.2]], &[1], Task::Osd);
        assert_eq!(s, vec![0.2]);
        assert_eq!(l, vec![false]);
        for t in [Task::Vad, Task::Osd] {
            assert_eq!(t.reduce_label(2), 1);
        }
        assert_eq!(Task::Vad.reduce_label(0), 0);
    }

    #[test]
    fn task_parse() {
        assert_eq!("OSD".parse::<Task>().unwrap(), Task::Osd);
        assert!("asr".parse::<Task>().is_err());
    }

    #[test]
    fn report_renders_na_rows() {
        let probs = [[0.9, 0.05, 0.05], [0.1, 0.8, 0.1]];
        let r = evaluate(&probs, &[0, 1], Task::Csd, 0.0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.confusion.rows[2].is_none());
        let text = r.to_string();
        assert!(text.contains("n/a"));
        assert!(text.contains("overlap"));
    }
}

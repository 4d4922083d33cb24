use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, Config, Manifest, ManifestEntry, PipelineError, Split};
use crate::calibmetrics::{
    apply_policy, calibrated_probs, confusion_matrix, evaluate, fit_temperature, CalibrationResult,
    nll_at, ConfusionMatrix, MetricsReport, Task,
};
use crate::featext::{read_wav, segment_start_time, stft_log_spectrum, write_wav, Spectrogram};
use crate::labelgen::{class_stats, label_track, load_transcript, ClassStats};
use crate::model::{CsdModel, ModelError};
use crate::trainloss::{
    argmax3, confusion_cost, cost_matrix_from_confusion, predict_logits, train_with_progress, CostMatrix,
    LossConfig, SegmentDataset, TrainConfig, TrainLog,
};

const EVAL_BATCH: usize = 64;

// --- synth -----------------------------------------------------------------

/// Renders every clip of the configured splits into `out_dir`, with one JSON
/// transcript per clip and a `manifest.json` that lists them.
pub fn cmd_synth(cfg: &Config, out_dir: &Path) -> Result<Manifest, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let plan = [
        (Split::Train, cfg.splits.train_clips),
        (Split::Val, cfg.splits.val_clips),
        (Split::Test, cfg.splits.test_clips),
    ];
    let mut manifest = Manifest::default();
    let mut clip = 0u64;
    for (split, count) in plan {
        for i in 0..count {
            let mut spec = cfg.scene.clone();
            spec.seed = cfg.scene.seed.wrapping_mul(1_000_003).wrapping_add(clip);
            clip += 1;
            let scene = super::synth_scene(&spec)?;
            let stem = format!("{}_{i:02}", split.name());
            let wav = PathBuf::from(format!("{stem}.wav"));
            let json = PathBuf::from(format!("{stem}.json"));
            write_wav(out_dir.join(&wav), &scene.audio)?;
            let text = serde_json::to_string_pretty(&scene.transcript).expect("transcript serializes");
            let tpath = out_dir.join(&json);
            fs::write(&tpath, text + "\n").map_err(|e| PipelineError::io(&tpath, e))?;
            log::info!("wrote {} ({} transcript segments)", wav.display(), scene.transcript.len());
            manifest.entries.push(ManifestEntry {
                audio_path: wav,
                transcript_path: json,
                split,
            });
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

// --- featurization ---------------------------------------------------------

pub fn featurize(entry: &ManifestEntry) -> Result<(Spectrogram, Vec<u8>), PipelineError> {
    let clip = read_wav(&entry.audio_path)?;
    let spec = stft_log_spectrum(&clip)?;
    let segments = load_transcript(&entry.transcript_path)?;
    let labels = label_track(&segments, spec.num_segments()).labels;
    Ok((spec, labels))
}

/// All segments of one split, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<SegmentDataset, PipelineError> {
    let mut ds = SegmentDataset::new();
    for entry in manifest.split(split) {
        let (spec, labels) = featurize(entry)?;
        ds.add_recording(spec, &labels).map_err(|e| match e {
            crate::trainloss::TrainError::Config(m) => {
                PipelineError::Input(format!("{}: {m}", entry.audio_path.display()))
            }
            other => other.into(),
        })?;
    }
    Ok(ds)
}

fn check_channels(model: &CsdModel, ds: &SegmentDataset) -> Result<(), PipelineError> {
    let cfg = model.config();
    if cfg.merge_type.binds_channel_count() && ds.channels() != cfg.channels {
        return Err(ModelError::ChannelMismatch {
            merge: cfg.merge_type,
            expected: cfg.channels,
            found: ds.channels(),
        }
        .into());
    }
    Ok(())
}

// --- train -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub epochs: TrainLog,
    pub val_accuracy: Option<f64>,
    pub val_confusion: Option<ConfusionMatrix>,
    /// Σ confusion·C on the validation split under the stage-two cost matrix.
    pub val_cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub train_segments: usize,
    pub val_segments: usize,
    pub class_stats: ClassStats,
    pub stage1: StageLog,
    pub cost_matrix: Option<CostMatrix>,
    pub stage2: Option<StageLog>,
}

/// Removes the listed files unless disarmed.
struct Cleanup(Vec<PathBuf>);

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn val_confusion(model: &CsdModel, val: &SegmentDataset) -> Result<(ConfusionMatrix, f64), PipelineError> {
    let logits = predict_logits(model, val, EVAL_BATCH)?;
    let pred: Vec<u8> = logits.iter().map(argmax3).collect();
    let correct = pred.iter().zip(val.labels()).filter(|(a, b)| a == b).count();
    let cm = confusion_matrix(&pred, val.labels(), 3)?;
    Ok((cm, correct as f64 / val.len() as f64))
}

/// Two-stage training. Writes `stage1.ckpt`, `stage2.ckpt` (unless
/// `stage1_only`) and `run_log.json` into `out_dir`. Files from a failed run
/// are removed.
pub fn cmd_train(
    cfg: &Config,
    manifest: &Manifest,
    out_dir: &Path,
    stage1_only: bool,
) -> Result<RunLog, PipelineError> {
    let train_ds = load_split(manifest, Split::Train)?;
    if train_ds.is_empty() {
        return Err(PipelineError::Input("the manifest has no training segments".into()));
    }
    let val_ds = load_split(manifest, Split::Val)?;
    if !stage1_only && val_ds.is_empty() {
        return Err(PipelineError::Input(
            "stage two needs a validation split to derive its cost matrix".into(),
        ));
    }
    let stats = class_stats(train_ds.labels())?;
    let weights = cfg.loss.class_weights.unwrap_or(stats.weights);
    log::info!(
        "{} training / {} validation segments; class frequencies {:.1?} %, weights {:.3?}",
        train_ds.len(),
        val_ds.len(),
        stats.frequencies,
        weights
    );

    let mut model = CsdModel::new(cfg.model.clone(), cfg.train.init_seed)?;
    check_channels(&model, &train_ds)?;
    if !val_ds.is_empty() {
        check_channels(&model, &val_ds)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let mut guard = Cleanup(Vec::new());

    let loss1 = cfg.stage_loss(weights);
    let tcfg1 = cfg.train.stage1();
    let started = Instant::now();
    let log1 = train_with_progress(&mut model, &train_ds, &tcfg1, &loss1, |e| {
        log::info!(
            "stage 1 epoch {}: loss {:.4}, accuracy {:.3} ({:.0?})",
            e.epoch + 1,
            e.mean_loss,
            e.accuracy,
            started.elapsed()
        );
    })?;
    let path1 = out_dir.join("stage1.ckpt");
    guard.0.push(path1.clone());
    Checkpoint {
        model: model.clone(),
        loss: loss1.clone(),
        stage: 1,
        calibration: None,
    }
    .save(&path1)?;

    let mut stage1 = StageLog {
        loss: loss1.clone(),
        train: tcfg1,
        epochs: log1,
        val_accuracy: None,
        val_confusion: None,
        val_cost: None,
    };
    let mut cost_matrix = None;
    let mut stage2 = None;
    if !val_ds.is_empty() {
        let (cm1, acc1) = val_confusion(&model, &val_ds)?;
        log::info!("stage 1 validation accuracy {acc1:.3}");
        stage1.val_accuracy = Some(acc1);
        stage1.val_confusion = Some(cm1.clone());
        if !stage1_only {
            let c = cost_matrix_from_confusion(&cm1.to_dense3());
            let cost1 = confusion_cost(&cm1.to_dense3(), &c);
            stage1.val_cost = Some(cost1);
            cost_matrix = Some(c);
            let loss2 = LossConfig {
                cost_matrix: c,
                cs_enabled: true,
                ..loss1.clone()
            };
            let tcfg2 = cfg.train.stage2();
            let log2 = if tcfg2.epochs > 0 {
                train_with_progress(&mut model, &train_ds, &tcfg2, &loss2, |e| {
                    log::info!(
                        "stage 2 epoch {}: loss {:.4}, accuracy {:.3} ({:.0?})",
                        e.epoch + 1,
                        e.mean_loss,
                        e.accuracy,
                        started.elapsed()
                    );
                })?
            } else {
                TrainLog::default()
            };
            let (cm2, acc2) = val_confusion(&model, &val_ds)?;
            let cost2 = confusion_cost(&cm2.to_dense3(), &c);
            log::info!("stage 2 validation accuracy {acc2:.3}; validation cost {cost1:.2} -> {cost2:.2}");
            let path2 = out_dir.join("stage2.ckpt");
            guard.0.push(path2.clone());
            Checkpoint {
                model: model.clone(),
                loss: loss2.clone(),
                stage: 2,
                calibration: None,
            }
            .save(&path2)?;
            stage2 = Some(StageLog {
                loss: loss2,
                train: tcfg2,
                epochs: log2,
                val_accuracy: Some(acc2),
                val_confusion: Some(cm2),
                val_cost: Some(cost2),
            });
        }
    }

    let run = RunLog {
        train_segments: train_ds.len(),
        val_segments: val_ds.len(),
        class_stats: stats,
        stage1,
        cost_matrix,
        stage2,
    };
    let log_path = out_dir.join("run_log.json");
    guard.0.push(log_path.clone());
    let text = serde_json::to_string_pretty(&run).expect("run log serializes");
    fs::write(&log_path, text + "\n").map_err(|e| PipelineError::io(&log_path, e))?;
    guard.0.clear();
    Ok(run)
}

// --- eval ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub stage: u8,
    pub merge_type: String,
    pub channels: usize,
    pub temperature: f64,
    pub tau: f64,
}

impl CheckpointSummary {
    pub fn of(ckpt: &Checkpoint) -> Self {
        Self {
            stage: ckpt.stage,
            merge_type: ckpt.model.config().merge_type.label().to_string(),
            channels: ckpt.model.config().channels,
            temperature: ckpt.temperature(),
            tau: ckpt.tau(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: CheckpointSummary,
    pub split: Split,
    pub report: MetricsReport,
}

impl std::fmt::Display for EvalOutput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = &self.checkpoint;
        writeln!(
            f,
            "checkpoint: stage {}, {}, {} channels, T = {:.4}, tau = {}",
            c.stage, c.merge_type, c.channels, c.temperature, c.tau
        )?;
        writeln!(f, "split: {}", self.split.name())?;
        write!(f, "{}", self.report)
    }
}

/// Calibrated probabilities for a whole split.
pub fn split_probabilities(
    ckpt: &Checkpoint,
    ds: &SegmentDataset,
) -> Result<Vec<[f64; 3]>, PipelineError> {
    check_channels(&ckpt.model, ds)?;
    let t = ckpt.temperature();
    Ok(predict_logits(&ckpt.model, ds, EVAL_BATCH)?
        .iter()
        .map(|l| calibrated_probs(l, t))
        .collect())
}

pub fn cmd_eval(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    split: Split,
    task: Task,
) -> Result<EvalOutput, PipelineError> {
    let ds = load_split(manifest, split)?;
    if ds.is_empty() {
        return Err(PipelineError::Input(format!("the {} split is empty", split.name())));
    }
    let probs = split_probabilities(ckpt, &ds)?;
    let report = evaluate(&probs, ds.labels(), task, ckpt.tau())?;
    Ok(EvalOutput {
        checkpoint: CheckpointSummary::of(ckpt),
        split,
        report,
    })
}

// --- calibrate -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOutput {
    /// Temperature stored before this run (1 when uncalibrated).
    pub previous_temperature: f64,
    /// Split NLL under the previous temperature.
    pub nll_previous: f64,
    /// What is now stored in the checkpoint.
    pub stored: CalibrationResult,
}

/// Fits a temperature on the split's raw logits and stores it, replacing any
/// earlier one. `tau` replaces the stored threshold when given.
pub fn cmd_calibrate(
    ckpt: &mut Checkpoint,
    manifest: &Manifest,
    split: Split,
    tau: Option<f64>,
) -> Result<CalibrateOutput, PipelineError> {
    if let Some(t) = tau {
        if !(0.0..=1.0).contains(&t) {
            return Err(PipelineError::Input(format!("tau must be in [0, 1], got {t}")));
        }
    }
    let ds = load_split(manifest, split)?;
    if ds.is_empty() {
        return Err(PipelineError::Input(format!(
            "the {} split is empty; nothing to calibrate on",
            split.name()
        )));
    }
    check_channels(&ckpt.model, &ds)?;
    let previous = ckpt.temperature();
    let logits = predict_logits(&ckpt.model, &ds, EVAL_BATCH)?;
    let nll_previous = nll_at(&logits, ds.labels(), previous);
    let fitted = fit_temperature(&logits, ds.labels())?;
    let stored = CalibrationResult {
        tau: tau.unwrap_or_else(|| ckpt.tau()),
        ..fitted
    };
    log::info!(
        "{} NLL {:.5} (T = 1) -> {:.5}; temperature {:.4}",
        split.name(),
        fitted.nll_before,
        fitted.nll_after,
        stored.temperature
    );
    ckpt.calibration = Some(stored);
    Ok(CalibrateOutput {
        previous_temperature: previous,
        nll_previous,
        stored,
    })
}

// --- infer -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferLine {
    pub start_time: f64,
    pub class: u8,
    pub probs: [f64; 3],
    pub policy_class: u8,
}

/// Per-segment decisions for one recording, in time order.
pub fn cmd_infer(ckpt: &Checkpoint, wav: &Path) -> Result<Vec<InferLine>, PipelineError> {
    let clip = read_wav(wav)?;
    let spec = stft_log_spectrum(&clip)?;
    let n = spec.num_segments();
    let mut ds = SegmentDataset::new();
    ds.add_recording(spec, &vec![0; n])?;
    let probs = split_probabilities(ckpt, &ds)?;
    let tau = ckpt.tau();
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| InferLine {
            start_time: segment_start_time(i),
            class: argmax3(&p),
            probs: p,
            policy_class: apply_policy(&p, tau),
        })
        .collect())
}

pub fn write_jsonl(lines: &[InferLine], mut out: impl Write) -> std::io::Result<()> {
    for l in lines {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

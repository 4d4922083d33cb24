//! Ground-truth labels from transcribed speaker activity.
//!
//! A segment's class is the number of distinct speakers active in its
//! 100 ms core, capped at 2. The surrounding context frames feed the model
//! but do not influence the label.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featext::{SEGMENT_SECONDS, STRIDE_SECONDS};

pub const NUM_CLASSES: usize = 3;
pub const CORE_SECONDS: f64 = 0.1;
/// Offset of the labelled core from the segment start; the core is centred
/// in the segment's audio span.
pub const CORE_OFFSET_SECONDS: f64 = (SEGMENT_SECONDS - CORE_SECONDS) / 2.0;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("label track is empty")]
    EmptyTrack,
    #[error("invalid interval for speaker {speaker:?}: [{start}, {end})")]
    InvalidInterval { speaker: String, start: f64, end: f64 },
    #[error("RTTM line {line}: {msg}")]
    Rttm { line: usize, msg: String },
    #[error("transcript JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading transcript: {0}")]
    Io(#[from] std::io::Error),
}

/// One speaker's activity over `[start, end)` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub speaker: String,
    pub start: f64,
    pub end: f64,
}

impl TranscriptSegment {
    pub fn new(speaker: impl Into<String>, start: f64, end: f64) -> Result<Self, LabelError> {
        let seg = Self {
            speaker: speaker.into(),
            start,
            end,
        };
        seg.validate()?;
        Ok(seg)
    }

    fn validate(&self) -> Result<(), LabelError> {
        if !(self.start >= 0.0 && self.start < self.end && self.end.is_finite()) {
            return Err(LabelError::InvalidInterval {
                speaker: self.speaker.clone(),
                start: self.start,
                end: self.end,
            });
        }
        Ok(())
    }
}

/// Per-segment classes aligned with the feature segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTrack {
    pub stride_seconds: f64,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: [usize; NUM_CLASSES],
    /// Percent of labels per class.
    pub frequencies: [f64; NUM_CLASSES],
    /// Inverse-frequency weights with mean 1.
    pub weights: [f64; NUM_CLASSES],
}

/// Maximum number of distinct speakers simultaneously active in `[t0, t1)`,
/// by sweeping interval endpoints.
pub fn concurrency_count(segments: &[TranscriptSegment], t0: f64, t1: f64) -> usize {
    // (time, is_start, speaker); ends sort before starts at equal times
    // because intervals are half-open.
    let mut events: Vec<(f64, bool, &str)> = Vec::new();
    for s in segments {
        let start = s.start.max(t0);
        let end = s.end.min(t1);
        if start < end {
            events.push((start, true, &s.speaker));
            events.push((end, false, &s.speaker));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut active: HashMap<&str, usize> = HashMap::new();
    let mut distinct = 0;
    let mut best = 0;
    let mut i = 0;
    while i < events.len() {
        let time = events[i].0;
        while i < events.len() && events[i].0 == time {
            let (_, is_start, spk) = events[i];
            let count = active.entry(spk).or_insert(0);
            if is_start {
                if *count == 0 {
                    distinct += 1;
                }
                *count += 1;
            } else {
                *count -= 1;
                if *count == 0 {
                    distinct -= 1;
                }
            }
            i += 1;
        }
        if time < t1 {
            best = best.max(distinct);
        }
    }
    best
}

/// Class of the core interval `[core_start, core_start + core_len)`.
pub fn label_for_segment(segments: &[TranscriptSegment], core_start: f64, core_len: f64) -> u8 {
    concurrency_count(segments, core_start, core_start + core_len).min(2) as u8
}

/// Labels for the first `num_segments` feature segments of a recording.
pub fn label_track(segments: &[TranscriptSegment], num_segments: usize) -> LabelTrack {
    let labels = (0..num_segments)
        .map(|i| {
            let core = i as f64 * STRIDE_SECONDS + CORE_OFFSET_SECONDS;
            label_for_segment(segments, core, CORE_SECONDS)
        })
        .collect();
    LabelTrack {
        stride_seconds: STRIDE_SECONDS,
        labels,
    }
}

pub fn class_stats(labels: &[u8]) -> Result<ClassStats, LabelError> {
    if labels.is_empty() {
        return Err(LabelError::EmptyTrack);
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let total = labels.len() as f64;
    let frequencies = counts.map(|c| 100.0 * c as f64 / total);
    let raw = counts.map(|c| total / (NUM_CLASSES as f64 * c.max(1) as f64));
    let mean = raw.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok(ClassStats {
        counts,
        frequencies,
        weights: raw.map(|w| w / mean),
    })
}

pub fn parse_json_transcript(text: &str) -> Result<Vec<TranscriptSegment>, LabelError> {
    let segments: Vec<TranscriptSegment> = serde_json::from_str(text)?;
    for s in &segments {
        s.validate()?;
    }
    Ok(segments)
}

/// Parses `SPEAKER` rows of an RTTM file. Both the full ten-field layout
/// (speaker name in field 8) and a short `SPEAKER file chan onset dur name`
/// layout are accepted; other row types are skipped.
pub fn parse_rttm(text: &str) -> Result<Vec<TranscriptSegment>, LabelError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') || fields[0] != "SPEAKER" {
            continue;
        }
        let speaker = match fields.len() {
            6 | 7 => fields[5],
            len if len >= 8 => fields[7],
            len => {
                return Err(LabelError::Rttm {
                    line: line_no,
                    msg: format!("expected at least 6 fields, found {len}"),
                })
            }
        };
        let num = |i: usize, what: &str| {
            fields[i].parse::<f64>().map_err(|_| LabelError::Rttm {
                line: line_no,
                msg: format!("bad {what} {:?}", fields[i]),
            })
        };
        let onset = num(3, "onset")?;
        let duration = num(4, "duration")?;
        let seg = TranscriptSegment {
            speaker: speaker.to_string(),
            start: onset,
            end: onset + duration,
        };
        seg.validate().map_err(|e| LabelError::Rttm {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(seg);
    }
    Ok(out)
}

/// Loads a transcript, choosing the parser by extension (`.rttm`) or by a
/// leading `[` for JSON.
pub fn load_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptSegment>, LabelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let is_rttm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("rttm"));
    if !is_rttm && text.trim_start().starts_with('[') {
        parse_json_transcript(&text)
    } else {
        parse_rttm(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: &str, a: f64, b: f64) -> TranscriptSegment {
        TranscriptSegment::new(s, a, b).unwrap()
    }

    #[test]
    fn empty_transcript_counts_zero() {
        assert_eq!(concurrency_count(&[], 0.0, 10.0), 0);
    }

    #[test]
    fn two_overlapping_speakers() {
        let t = [seg("A", 0.0, 1.0), seg("B", 0.5, 2.0)];
        assert_eq!(concurrency_count(&t, 0.0, 2.0), 2);
        assert_eq!(concurrency_count(&t, 1.0, 2.0), 1);
    }

    #[test]
    fn same_speaker_counts_once() {
        let t = [seg("A", 0.0, 1.0), seg("A", 0.2, 0.8)];
        assert_eq!(concurrency_count(&t, 0.0, 1.0), 1);
    }

    #[test]
    fn touching_intervals_do_not_overlap() {
        let t = [seg("A", 0.0, 1.0), seg("B", 1.0, 2.0)];
        assert_eq!(concurrency_count(&t, 0.0, 2.0), 1);
    }

    #[test]
    fn labels_cap_at_two() {
        let t = [seg("A", 0.0, 1.0), seg("B", 0.0, 1.0), seg("C", 0.0, 1.0)];
        assert_eq!(concurrency_count(&t, 0.4, 0.5), 3);
        assert_eq!(label_for_segment(&t, 0.4, 0.1), 2);
        assert_eq!(label_for_segment(&[], 0.4, 0.1), 0);
    }

    #[test]
    fn context_activity_does_not_label_core() {
        // segment starting at 0: core is [0.214, 0.314); speech only in context
        let t = [seg("A", 0.0, 0.2), seg("B", 0.33, 0.5)];
        let track = label_track(&t, 1);
        assert_eq!(track.labels, vec![0]);
        assert!((CORE_OFFSET_SECONDS - 0.214).abs() < 1e-12);
    }

    #[test]
    fn balanced_stats() {
        let s = class_stats(&[0, 1, 2]).unwrap();
        for f in s.frequencies {
            assert!((f - 100.0 / 3.0).abs() < 1e-9);
        }
        for w in s.weights {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_frequency_weights() {
        // 168 / 718 / 114 out of 1000
        let mut labels = vec![0u8; 168];
        labels.extend(vec![1u8; 718]);
        labels.extend(vec![2u8; 114]);
        let s = class_stats(&labels).unwrap();
        assert!((s.frequencies[0] - 16.8).abs() < 1e-9);
        assert!((s.frequencies.iter().sum::<f64>() - 100.0).abs() < 0.1);
        let inv = [1.0 / 0.168, 1.0 / 0.718, 1.0 / 0.114];
        let mean = inv.iter().sum::<f64>() / 3.0;
        for c in 0..3 {
            assert!((s.weights[c] - inv[c] / mean).abs() < 1e-12);
        }
        assert!((s.weights.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        // ratios follow inverse frequency
        assert!((s.weights[0] / s.weights[1] - 0.718 / 0.168).abs() < 1e-12);
        assert!((s.weights[0] - 1.108).abs() < 1e-3);
        assert!((s.weights[1] - 0.259).abs() < 1e-3);
        assert!((s.weights[2] - 1.633).abs() < 1e-3);
    }

    #[test]
    fn degenerate_stats_use_guard() {
        let s = class_stats(&[1, 1, 1, 1]).unwrap();
        assert_eq!(s.counts, [0, 4, 0]);
        assert!(s.weights.iter().all(|&w| w > 0.0));
        // missing classes get n_c = 1 → raw weight 4/3 vs 1/3 for class 1
        assert!((s.weights[0] / s.weights[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_stats_error() {
        assert!(matches!(class_stats(&[]), Err(LabelError::EmptyTrack)));
    }

    #[test]
    fn rttm_rows() {
        let text = "\
# comment
SPEAKER mtg 1 0.50 1.25 <NA> <NA> alice <NA> <NA>
SPK-INFO mtg 1 <NA> <NA> <NA> unknown bob <NA> <NA>
SPEAKER mtg 1 1.00 0.50 bob
";
        let segs = parse_rttm(text).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0], seg("alice", 0.5, 1.75));
        assert_eq!(segs[1], seg("bob", 1.0, 1.5));
    }

    #[test]
    fn rttm_bad_number() {
        let err = parse_rttm("SPEAKER f 1 x 1.0 s").unwrap_err();
        assert!(matches!(err, LabelError::Rttm { line: 1, .. }));
        assert!(parse_rttm("SPEAKER f 1 1.0 0.0 s").is_err());
    }

    #[test]
    fn json_transcript() {
        let segs =
            parse_json_transcript(r#"[{"speaker":"a","start":0.0,"end":1.5}]"#).unwrap();
        assert_eq!(segs, vec![seg("a", 0.0, 1.5)]);
        assert!(parse_json_transcript(r#"[{"speaker":"a","start":2.0,"end":1.0}]"#).is_err());
    }
}

//! Seeded multichannel scenes with a known speaker timeline.
//!
//! A scene is a run of blocks, each holding zero, one, or several
//! simultaneously active speakers. Block classes are picked greedily to track
//! the requested class fractions. Every speaker is a vibrato harmonic tone
//! with a syllable-rate envelope, evaluated analytically at a per-channel
//! delayed time, so fractional delays are exact. Each channel gets its own
//! colored noise.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::featext::{AudioClip, SAMPLE_RATE};
use crate::labelgen::TranscriptSegment;

/// Harmonics stop below this frequency.
const MAX_HARMONIC_HZ: f64 = 3800.0;
/// Raised-cosine on/off ramps at block edges.
const RAMP_SECONDS: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_channels: usize,
    /// Seconds per clip.
    pub duration: f64,
    /// RMS of the per-channel noise.
    pub noise_level: f64,
    /// Peak amplitude of a single speaker before channel gains.
    pub speech_level: f64,
    pub num_speakers: usize,
    /// Fundamental-frequency range in Hz; speakers are spread across it.
    pub f0_range: [f64; 2],
    /// Target fraction of time with 0, 1, and 2+ active speakers.
    pub class_targets: [f64; 3],
    /// Block length range in seconds.
    pub block_seconds: [f64; 2],
    /// Per-speaker, per-channel delay range in samples.
    pub delay_range: [f64; 2],
    pub gain_range: [f64; 2],
    /// Chance that an overlap block holds three speakers rather than two.
    pub triple_overlap: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_channels: 2,
            duration: 60.0,
            noise_level: 0.005,
            speech_level: 0.1,
            num_speakers: 4,
            f0_range: [100.0, 260.0],
            class_targets: [0.2, 0.6, 0.2],
            block_seconds: [1.0, 3.0],
            delay_range: [0.0, 8.0],
            gain_range: [0.6, 1.0],
            triple_overlap: 0.15,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(format!("scene: {m}")));
        if self.num_channels == 0 {
            return fail("num_channels must be at least 1".into());
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return fail(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.noise_level >= 0.0 && self.speech_level >= 0.0) {
            return fail("noise_level and speech_level must be non-negative".into());
        }
        if self.class_targets.iter().any(|t| !(*t >= 0.0)) {
            return fail(format!("class targets must be non-negative: {:?}", self.class_targets));
        }
        let total: f64 = self.class_targets.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return fail(format!("class targets sum to {total}, not 1"));
        }
        if self.class_targets[1] > 0.0 && self.num_speakers < 1 {
            return fail("single-speaker time requested with no speakers".into());
        }
        if self.class_targets[2] > 0.0 && self.num_speakers < 2 {
            return fail("overlap time requested with fewer than two speakers".into());
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.f0_range) || self.f0_range[0] < 50.0 || self.f0_range[1] > 1000.0 {
            return fail(format!("f0_range {:?} must lie within [50, 1000] Hz", self.f0_range));
        }
        if !ordered(self.block_seconds) || self.block_seconds[0] <= 0.0 {
            return fail(format!("block_seconds {:?} must be positive and ordered", self.block_seconds));
        }
        if !ordered(self.delay_range) || self.delay_range[0] < 0.0 {
            return fail(format!("delay_range {:?} must be non-negative and ordered", self.delay_range));
        }
        if !ordered(self.gain_range) || self.gain_range[0] < 0.0 {
            return fail(format!("gain_range {:?} must be non-negative and ordered", self.gain_range));
        }
        if !(0.0..=1.0).contains(&self.triple_overlap) {
            return fail("triple_overlap must be a probability".into());
        }
        Ok(())
    }
}

/// A stretch of time with a fixed set of active speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub start: f64,
    pub end: f64,
    pub speakers: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub audio: AudioClip,
    pub transcript: Vec<TranscriptSegment>,
    pub blocks: Vec<Block>,
}

pub fn speaker_name(index: usize) -> String {
    format!("spk{index}")
}

/// Class-tracking block timeline.
pub fn build_timeline(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut realized = [0.0f64; 3];
    let mut t = 0.0;
    while t < spec.duration - 1e-9 {
        let [lo, hi] = spec.block_seconds;
        let len = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let end = (t + len).min(spec.duration);
        let horizon = end;
        let mut class = 0;
        let mut best = f64::NEG_INFINITY;
        for c in 0..3 {
            if spec.class_targets[c] <= 0.0 {
                continue;
            }
            let deficit = spec.class_targets[c] * horizon - realized[c];
            if deficit > best {
                best = deficit;
                class = c;
            }
        }
        realized[class] += end - t;
        let count = match class {
            0 => 0,
            1 => 1,
            _ if spec.num_speakers >= 3 && rng.gen_bool(spec.triple_overlap) => 3,
            _ => 2,
        };
        let mut pool: Vec<usize> = (0..spec.num_speakers).collect();
        pool.shuffle(rng);
        let mut speakers = pool[..count].to_vec();
        speakers.sort_unstable();
        blocks.push(Block { start: t, end, speakers });
        t = end;
    }
    blocks
}

struct Voice {
    f0: f64,
    vibrato_depth: f64,
    vibrato_rate: f64,
    vibrato_phase: f64,
    am_rate: f64,
    am_phase: f64,
    level: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Voice {
    fn random(f0: f64, level: f64, rng: &mut impl Rng) -> Self {
        let vibrato_depth = rng.gen_range(0.01..0.03);
        let top = f0 * (1.0 + vibrato_depth);
        let count = ((MAX_HARMONIC_HZ / top).floor() as usize).max(1);
        let a = rng.gen_range(0.3..1.2);
        let b = rng.gen_range(0.0..TAU);
        let harmonics = (1..=count)
            .map(|h| {
                let h = h as f64;
                let amp = (1.0 + 0.6 * (a * h + b).sin()) / h;
                (amp, rng.gen_range(0.0..TAU))
            })
            .collect();
        Self {
            f0,
            vibrato_depth,
            vibrato_rate: rng.gen_range(0.3..0.8),
            vibrato_phase: rng.gen_range(0.0..TAU),
            am_rate: rng.gen_range(3.0..5.5),
            am_phase: rng.gen_range(0.0..TAU),
            level,
            harmonics,
        }
    }

    /// Instantaneous phase of the fundamental, integrated in closed form.
    fn phase(&self, t: f64) -> f64 {
        let w = TAU * self.vibrato_rate;
        let drift = self.vibrato_depth / w * ((self.vibrato_phase).cos() - (w * t + self.vibrato_phase).cos());
        TAU * self.f0 * (t + drift)
    }

    fn sample(&self, t: f64) -> f64 {
        let env = 0.55 + 0.45 * (TAU * self.am_rate * t + self.am_phase).sin();
        let (s1, c1) = self.phase(t).sin_cos();
        // (sin hθ, cos hθ) by repeated rotation.
        let (mut s, mut c) = (s1, c1);
        let mut acc = 0.0;
        for &(amp, ph) in &self.harmonics {
            let (sp, cp) = ph.sin_cos();
            acc += amp * (s * cp + c * sp);
            let next_s = s * c1 + c * s1;
            c = c * c1 - s * s1;
            s = next_s;
        }
        self.level * env * acc
    }
}

fn ramp(t: f64, start: f64, end: f64) -> f64 {
    let edge = (t - start).min(end - t);
    if edge >= RAMP_SECONDS {
        1.0
    } else if edge <= 0.0 {
        0.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge / RAMP_SECONDS).cos()
    }
}

fn colored_noise(len: usize, rms: f64, rng: &mut impl Rng) -> Vec<f64> {
    // Half the power through a one-pole low-pass, half white.
    const POLE: f64 = 0.95;
    let lp_gain = (1.0 - POLE * POLE).sqrt();
    let mut state = 0.0;
    (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            let x: f64 = rng.sample(StandardNormal);
            state = POLE * state + lp_gain * w;
            rms * std::f64::consts::FRAC_1_SQRT_2 * (state + x)
        })
        .collect()
}

/// Renders one scene. Identical specs give bit-identical output.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fs = SAMPLE_RATE as f64;
    let len = (spec.duration * fs).round() as usize;

    let [f_lo, f_hi] = spec.f0_range;
    let k = spec.num_speakers;
    let voices: Vec<Voice> = (0..k)
        .map(|i| {
            let f0 = f_lo + (f_hi - f_lo) * (i as f64 + rng.gen_range(0.2..0.8)) / k as f64;
            let level = spec.speech_level * rng.gen_range(0.8..1.0);
            Voice::random(f0, level, &mut rng)
        })
        .collect();
    let [d_lo, d_hi] = spec.delay_range;
    let [g_lo, g_hi] = spec.gain_range;
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    // [speaker][channel] -> (delay seconds, gain)
    let placement: Vec<Vec<(f64, f64)>> = (0..k)
        .map(|_| {
            (0..spec.num_channels)
                .map(|_| (pick(&mut rng, d_lo, d_hi) / fs, pick(&mut rng, g_lo, g_hi)))
                .collect()
        })
        .collect();

    let blocks = build_timeline(spec, &mut rng);

    let mut channels: Vec<Vec<f64>> = (0..spec.num_channels)
        .map(|_| colored_noise(len, spec.noise_level, &mut rng))
        .collect();
    for block in &blocks {
        let first = (block.start * fs).floor() as usize;
        let last = ((block.end * fs).ceil() as usize + 1).min(len);
        for &s in &block.speakers {
            for (c, out) in channels.iter_mut().enumerate() {
                let (delay, gain) = placement[s][c];
                for (n, o) in out.iter_mut().enumerate().take(last).skip(first) {
                    let t = n as f64 / fs;
                    let w = ramp(t, block.start, block.end);
                    if w > 0.0 {
                        *o += gain * w * voices[s].sample(t - delay);
                    }
                }
            }
        }
    }

    let mut transcript = Vec::new();
    for block in &blocks {
        for &s in &block.speakers {
            transcript.push(
                TranscriptSegment::new(speaker_name(s), block.start, block.end)
                    .map_err(|e| PipelineError::Runtime(e.to_string()))?,
            );
        }
    }
    let audio = AudioClip::new(
        SAMPLE_RATE,
        channels
            .into_iter()
            .map(|ch| ch.into_iter().map(|v| v as f32).collect())
            .collect(),
    )?;
    Ok(Scene {
        audio,
        transcript,
        blocks,
    })
}

//! Log-spectrum features: STFT with a 512-point periodic Hann window and a
//! 256-sample hop, cut into 32-frame segments.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::numcore::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_LEN: usize = 512;
pub const HOP_LEN: usize = 256;
pub const FREQ_BINS: usize = WINDOW_LEN / 2 + 1;
pub const SEGMENT_FRAMES: usize = 32;
/// Segment advance in frames. 6 hops = 96 ms, the hop multiple closest to
/// the nominal 100 ms label resolution.
pub const SEGMENT_STRIDE: usize = 6;
/// Added to the magnitude before the log so silence maps to `ln(1e-10)`.
pub const LOG_FLOOR: f64 = 1e-10;

pub const HOP_SECONDS: f64 = HOP_LEN as f64 / SAMPLE_RATE as f64;
pub const STRIDE_SECONDS: f64 = SEGMENT_STRIDE as f64 * HOP_SECONDS;
/// Audio span of one segment: 512 + 31·256 samples.
pub const SEGMENT_SECONDS: f64 =
    (WINDOW_LEN + (SEGMENT_FRAMES - 1) * HOP_LEN) as f64 / SAMPLE_RATE as f64;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("sample rate {found} Hz is not supported: audio must already be {SAMPLE_RATE} Hz (resampling is out of scope)")]
    SampleRate { found: u32 },
    #[error("clip has {len} samples, fewer than one {WINDOW_LEN}-sample window")]
    TooShort { len: usize },
    #[error("channels have unequal lengths")]
    RaggedChannels,
    #[error("clip has no channels")]
    NoChannels,
    #[error("unsupported WAV encoding: {0}")]
    Encoding(String),
    #[error("WAV parse error: {0}")]
    Wav(#[from] hound::Error),
}

/// Multichannel 16 kHz audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    sample_rate: u32,
    channels: Vec<Vec<f32>>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f32>>) -> Result<Self, FeatError> {
        if sample_rate != SAMPLE_RATE {
            return Err(FeatError::SampleRate { found: sample_rate });
        }
        let first = channels.first().ok_or(FeatError::NoChannels)?;
        if channels.iter().any(|c| c.len() != first.len()) {
            return Err(FeatError::RaggedChannels);
        }
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Single-channel clip holding channel `index`.
    pub fn channel(&self, index: usize) -> AudioClip {
        AudioClip {
            sample_rate: self.sample_rate,
            channels: vec![self.channels[index].clone()],
        }
    }
}

/// Log-magnitude grid, stored channel-major then frequency then frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    channels: usize,
    frames: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn from_raw(channels: usize, frames: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == channels * FREQ_BINS * frames).then_some(Self {
            channels,
            frames,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, channel: usize, bin: usize, frame: usize) -> f64 {
        self.data[(channel * FREQ_BINS + bin) * self.frames + frame]
    }

    pub fn num_segments(&self) -> usize {
        segment_count(self.frames)
    }

    /// Copies segment `index` into `out` (`channels × 257 × 32`).
    pub fn write_segment(&self, index: usize, out: &mut [f64]) {
        let start = index * SEGMENT_STRIDE;
        debug_assert!(start + SEGMENT_FRAMES <= self.frames);
        debug_assert_eq!(out.len(), self.channels * FREQ_BINS * SEGMENT_FRAMES);
        for (row, dst) in out.chunks_mut(SEGMENT_FRAMES).enumerate() {
            let src = row * self.frames + start;
            dst.copy_from_slice(&self.data[src..src + SEGMENT_FRAMES]);
        }
    }

    pub fn segment(&self, index: usize) -> SegmentTensor {
        let mut data = vec![0.0; self.channels * FREQ_BINS * SEGMENT_FRAMES];
        self.write_segment(index, &mut data);
        SegmentTensor {
            data: Tensor::new(vec![self.channels, FREQ_BINS, SEGMENT_FRAMES], data)
                .expect("spectrogram values are finite"),
            start_time: segment_start_time(index),
        }
    }
}

/// One model input: `channels × 257 × 32` log-spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTensor {
    pub data: Tensor,
    /// Start of the segment's first frame, in seconds.
    pub start_time: f64,
}

pub fn frame_count(samples: usize) -> usize {
    if samples < WINDOW_LEN {
        0
    } else {
        (samples - WINDOW_LEN) / HOP_LEN + 1
    }
}

pub fn segment_count(frames: usize) -> usize {
    if frames < SEGMENT_FRAMES {
        0
    } else {
        (frames - SEGMENT_FRAMES) / SEGMENT_STRIDE + 1
    }
}

pub fn segment_start_time(index: usize) -> f64 {
    (index * SEGMENT_STRIDE * HOP_LEN) as f64 / SAMPLE_RATE as f64
}

fn periodic_hann() -> Vec<f64> {
    (0..WINDOW_LEN)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW_LEN as f64).cos())
        .collect()
}

pub fn stft_log_spectrum(clip: &AudioClip) -> Result<Spectrogram, FeatError> {
    let frames = frame_count(clip.len());
    if frames == 0 {
        return Err(FeatError::TooShort { len: clip.len() });
    }
    let window = periodic_hann();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW_LEN);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW_LEN];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = vec![0.0; clip.num_channels() * FREQ_BINS * frames];

    for (c, samples) in clip.channels().iter().enumerate() {
        let plane = &mut data[c * FREQ_BINS * frames..(c + 1) * FREQ_BINS * frames];
        for t in 0..frames {
            let frame = &samples[t * HOP_LEN..t * HOP_LEN + WINDOW_LEN];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
                *b = Complex::new(s as f64 * w, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, x) in buf[..FREQ_BINS].iter().enumerate() {
                plane[k * frames + t] = (x.norm() + LOG_FLOOR).ln();
            }
        }
    }
    Ok(Spectrogram {
        channels: clip.num_channels(),
        frames,
        data,
    })
}

/// Sliding 32-frame windows advancing by [`SEGMENT_STRIDE`]; a trailing
/// partial window is dropped.
pub fn segmentize(spec: &Spectrogram) -> Vec<SegmentTensor> {
    (0..spec.num_segments()).map(|i| spec.segment(i)).collect()
}

/// Reads a PCM16 or float32 WAV file. Integer samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, FeatError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(FeatError::SampleRate {
            found: spec.sample_rate,
        });
    }
    let n = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(FeatError::Encoding(format!("{fmt:?} with {bits} bits per sample")))
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n.max(1)); n];
    for frame in interleaved.chunks_exact(n) {
        for (ch, &s) in channels.iter_mut().zip(frame) {
            ch.push(s);
        }
    }
    AudioClip::new(spec.sample_rate, channels)
}

/// Writes a clip as 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), FeatError> {
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for i in 0..clip.len() {
        for ch in clip.channels() {
            writer.write_sample(ch[i])?;
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(channels: Vec<Vec<f32>>) -> AudioClip {
        AudioClip::new(SAMPLE_RATE, channels).unwrap()
    }

    #[test]
    fn frame_count_for_one_second() {
        let spec = stft_log_spectrum(&clip(vec![vec![0.0; 16_000]])).unwrap();
        assert_eq!(spec.frames(), 61);
    }

    #[test]
    fn silence_hits_the_floor() {
        let spec = stft_log_spectrum(&clip(vec![vec![0.0; 2048]; 2])).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(spec.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn sinusoid_peaks_at_its_bin() {
        let samples: Vec<f32> = (0..8000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin() as f32 * 0.5)
            .collect();
        let spec = stft_log_spectrum(&clip(vec![samples])).unwrap();
        for t in 0..spec.frames() {
            let argmax = (0..FREQ_BINS)
                .max_by(|&a, &b| spec.at(0, a, t).total_cmp(&spec.at(0, b, t)))
                .unwrap();
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let err = stft_log_spectrum(&clip(vec![vec![0.0; 511]])).unwrap_err();
        assert!(matches!(err, FeatError::TooShort { len: 511 }));
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let err = AudioClip::new(44_100, vec![vec![0.0; 10]]).unwrap_err();
        assert!(err.to_string().contains("16000"));
    }

    #[test]
    fn segment_counts() {
        assert_eq!(segment_count(32), 1);
        assert_eq!(segment_count(61), 5);
        assert_eq!(segment_count(31), 0);
        assert_eq!(segment_count(0), 0);
    }

    #[test]
    fn segmentize_shapes_and_times() {
        let spec = stft_log_spectrum(&clip(vec![vec![0.01; 16_000]; 2])).unwrap();
        let segs = segmentize(&spec);
        assert_eq!(segs.len(), 5);
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.data.shape(), &[2, FREQ_BINS, SEGMENT_FRAMES]);
            assert!((s.start_time - i as f64 * 0.096).abs() < 1e-12);
        }
        assert_eq!(segs[1].data.data()[0], spec.at(0, 0, 6));
    }

    #[test]
    fn short_spectrogram_has_no_segments() {
        // 31 frames need 512 + 30·256 samples
        let spec = stft_log_spectrum(&clip(vec![vec![0.0; 512 + 30 * 256]])).unwrap();
        assert_eq!(spec.frames(), 31);
        assert!(segmentize(&spec).is_empty());
    }
}

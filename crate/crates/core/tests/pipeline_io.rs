use std::fs;

use csd_core::featext::{frame_count, segment_count, SAMPLE_RATE};
use csd_core::calibmetrics::CalibrationResult;
use csd_core::labelgen::{label_track, CORE_OFFSET_SECONDS, CORE_SECONDS};
use csd_core::featext::STRIDE_SECONDS;
use csd_core::model::{CsdModel, MergeType, ModelConfig};
use csd_core::pipeline::synth::{build_timeline, Block};
use csd_core::pipeline::*;
use csd_core::trainloss::LossConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(duration: f64, targets: [f64; 3], seed: u64) -> SceneSpec {
    SceneSpec {
        duration,
        class_targets: targets,
        seed,
        ..SceneSpec::default()
    }
}

fn labels_of(scene: &Scene) -> Vec<u8> {
    let n = segment_count(frame_count(scene.audio.len()));
    label_track(&scene.transcript, n).labels
}

fn fractions(labels: &[u8]) -> [f64; 3] {
    let mut f = [0.0; 3];
    for &l in labels {
        f[l as usize] += 1.0 / labels.len() as f64;
    }
    f
}

#[test]
fn scene_hits_class_targets() {
    let scene = synth_scene(&spec(60.0, [0.2, 0.6, 0.2], 7)).unwrap();
    let f = fractions(&labels_of(&scene));
    for (got, want) in f.iter().zip([0.2, 0.6, 0.2]) {
        assert!((got - want).abs() <= 0.05, "{f:?}");
    }
    assert_eq!(scene.audio.num_channels(), 2);
    assert_eq!(scene.audio.len(), 60 * SAMPLE_RATE as usize);
}

#[test]
fn noise_only_scene_has_empty_transcript() {
    let scene = synth_scene(&spec(5.0, [1.0, 0.0, 0.0], 1)).unwrap();
    assert!(scene.transcript.is_empty());
    assert!(labels_of(&scene).iter().all(|&l| l == 0));
}

#[test]
fn scene_is_deterministic() {
    let s = spec(4.0, [0.2, 0.6, 0.2], 3);
    let a = synth_scene(&s).unwrap();
    let b = synth_scene(&s).unwrap();
    assert_eq!(a.audio.channels(), b.audio.channels());
    assert_eq!(a.transcript, b.transcript);
    let c = synth_scene(&spec(4.0, [0.2, 0.6, 0.2], 4)).unwrap();
    assert_ne!(a.audio.channels(), c.audio.channels());
}

/// Label of a segment read straight off the block timeline.
fn timeline_label(blocks: &[Block], index: usize) -> u8 {
    let a = index as f64 * STRIDE_SECONDS + CORE_OFFSET_SECONDS;
    let b = a + CORE_SECONDS;
    blocks
        .iter()
        .filter(|blk| blk.start < b && blk.end > a)
        .map(|blk| blk.speakers.len().min(2) as u8)
        .max()
        .unwrap_or(0)
}

#[test]
fn transcript_labels_match_the_timeline() {
    for seed in 0..5 {
        let scene = synth_scene(&spec(20.0, [0.3, 0.4, 0.3], seed)).unwrap();
        let labels = labels_of(&scene);
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(l, timeline_label(&scene.blocks, i), "seed {seed}, segment {i}");
        }
    }
}

#[test]
fn timeline_tiles_the_clip() {
    let s = spec(30.0, [0.2, 0.6, 0.2], 9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let blocks = build_timeline(&s, &mut rng);
    assert_eq!(blocks[0].start, 0.0);
    assert_eq!(blocks.last().unwrap().end, 30.0);
    for w in blocks.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    for b in &blocks {
        let mut sp = b.speakers.clone();
        sp.dedup();
        assert_eq!(sp.len(), b.speakers.len());
    }
}

#[test]
fn infeasible_scenes_are_rejected() {
    let mut s = spec(5.0, [0.2, 0.6, 0.3], 0);
    assert!(matches!(synth_scene(&s), Err(PipelineError::Config(_))));
    s.class_targets = [0.5, 0.0, 0.5];
    s.num_speakers = 1;
    assert!(synth_scene(&s).is_err());
    let s = SceneSpec {
        num_channels: 0,
        ..SceneSpec::default()
    };
    assert!(synth_scene(&s).is_err());
}

fn small_checkpoint() -> Checkpoint {
    let cfg = ModelConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        classifier_hidden: 4,
        merge_type: MergeType::Sum,
        ..ModelConfig::desk()
    };
    Checkpoint {
        model: CsdModel::new(cfg, 3).unwrap(),
        loss: LossConfig {
            class_weights: [1.1, 0.3, 1.6],
            cost_matrix: [[0.0, 0.2, 1.0], [0.1, 0.0, 1.0], [0.027, 1.0, 0.0]],
            cs_enabled: true,
            ..LossConfig::default()
        },
        stage: 2,
        calibration: Some(CalibrationResult {
            temperature: 1.37,
            nll_before: 0.5,
            nll_after: 0.4,
            tau: 0.25,
        }),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let ck = small_checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.model.weights(), ck.model.weights());
    assert_eq!(back.loss, ck.loss);
    assert_eq!(back.calibration, ck.calibration);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    ck.save(&p).unwrap();
    let q = dir.path().join("m2.ckpt");
    Checkpoint::load(&p).unwrap().save(&q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn header_floats_survive_the_round_trip() {
    let mut ck = small_checkpoint();
    let mut x = 1.0824199660005729f64;
    for _ in 0..200 {
        x = (x * 1.618033988749895).fract() + 0.3;
        ck.calibration = Some(CalibrationResult {
            temperature: x / 7.0,
            nll_before: x,
            nll_after: x.powf(1.3),
            tau: x.fract(),
        });
        ck.loss.class_weights = [x, 1.0 / x, x * x];
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}

#[test]
fn checkpoint_layout() {
    let ck = small_checkpoint();
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    assert_eq!(header.format_version, FORMAT_VERSION);
    let mut expected = 0u64;
    for (e, t) in header.tensors.iter().zip(ck.model.weights().iter()) {
        assert_eq!(e.offset, expected);
        expected += 8 * t.len() as u64;
    }
    assert_eq!(bytes.len() - 16 - hlen, expected as usize);
    // First payload value is the first weight, little-endian.
    let first = f64::from_le_bytes(bytes[16 + hlen..24 + hlen].try_into().unwrap());
    assert_eq!(first, ck.model.weights().iter().next().unwrap().data()[0]);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = small_checkpoint().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(matches!(err, PipelineError::Format(_)));
    assert_eq!(err.exit_code(), EXIT_INPUT);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(&longer).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
}

#[test]
fn shipped_profiles_parse() {
    let desk = Config::desk();
    assert_eq!(desk.model, ModelConfig::desk());
    assert_eq!(desk.model.channels, desk.scene.num_channels);
    let paper = Config::paper();
    assert_eq!(paper.model, ModelConfig::paper(MergeType::Concat, 8));
    assert_eq!(paper.train.batch_size, 128);
}

#[test]
fn config_errors_are_input_errors() {
    let bad = DESK_TOML.replace("heads = 4", "heads = 5");
    let err = Config::parse(&bad).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_INPUT);
    let typo = DESK_TOML.replace("label_smoothing", "label_smothing");
    assert!(Config::parse(&typo).is_err());
    let mismatch = DESK_TOML.replace("num_channels = 2", "num_channels = 3");
    assert!(Config::parse(&mismatch).is_err());
}

#[test]
fn manifest_resolution_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.wav"), b"").unwrap();
    fs::write(dir.path().join("a.json"), b"[]").unwrap();
    let m = Manifest {
        entries: vec![ManifestEntry {
            audio_path: "a.wav".into(),
            transcript_path: "a.json".into(),
            split: Split::Train,
        }],
    };
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let loaded = Manifest::load(&path).unwrap();
    assert_eq!(loaded.entries[0].audio_path, dir.path().join("a.wav"));

    let mut dup = m.clone();
    dup.entries.push(ManifestEntry {
        split: Split::Test,
        ..m.entries[0].clone()
    });
    dup.save(&path).unwrap();
    assert!(matches!(Manifest::load(&path), Err(PipelineError::Input(_))));

    let mut missing = m.clone();
    missing.entries[0].audio_path = "nope.wav".into();
    missing.save(&path).unwrap();
    assert!(Manifest::load(&path).is_err());
}

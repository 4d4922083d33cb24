use std::collections::HashSet;

use csd_core::labelgen::{concurrency_count, label_for_segment, TranscriptSegment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Intervals on a 10 ms grid, so 1 ms midpoint sampling never straddles an
/// endpoint.
fn random_transcript(rng: &mut ChaCha8Rng) -> Vec<TranscriptSegment> {
    let n = rng.gen_range(0..8);
    (0..n)
        .map(|_| {
            let a = rng.gen_range(0..300);
            let b = a + rng.gen_range(1..120);
            TranscriptSegment::new(format!("s{}", rng.gen_range(0..4)), a as f64 * 0.01, b as f64 * 0.01)
                .unwrap()
        })
        .collect()
}

fn brute_force(segs: &[TranscriptSegment], t0: f64, t1: f64) -> usize {
    let steps = ((t1 - t0) * 1000.0).round() as usize;
    (0..steps)
        .map(|k| {
            let t = t0 + (k as f64 + 0.5) * 1e-3;
            segs.iter()
                .filter(|s| s.start <= t && t < s.end)
                .map(|s| s.speaker.as_str())
                .collect::<HashSet<_>>()
                .len()
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn sweep_matches_millisecond_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let segs = random_transcript(&mut rng);
        let a = rng.gen_range(0..350);
        let b = a + rng.gen_range(1..150);
        let (t0, t1) = (a as f64 * 0.01, b as f64 * 0.01);
        assert_eq!(concurrency_count(&segs, t0, t1), brute_force(&segs, t0, t1), "{segs:?} [{t0}, {t1})");
    }
}

proptest! {
    #[test]
    fn adding_a_segment_never_lowers_a_label(seed in 0u64..10_000, core in 0usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut segs = random_transcript(&mut rng);
        let core_start = core as f64 * 0.01;
        let before = label_for_segment(&segs, core_start, 0.1);
        let a = rng.gen_range(0.0..4.0);
        segs.push(TranscriptSegment::new("extra", a, a + rng.gen_range(0.01..1.0)).unwrap());
        prop_assert!(label_for_segment(&segs, core_start, 0.1) >= before);
    }
}

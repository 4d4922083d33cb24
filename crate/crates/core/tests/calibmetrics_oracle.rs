use csd_core::calibmetrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Enumerates every candidate threshold independently: for each distinct
/// score `t`, classify `score >= t` as positive and count from scratch.
fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let r = tp / positives;
        ap += (r - prev_r) * tp / (tp + fp);
        prev_r = r;
    }
    ap
}

#[test]
fn ap_examples() {
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[false, false, true, true]).unwrap();
    assert!((ap - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    let ap = average_precision(&[0.2, 0.9, 0.8, 0.1], &[false, true, true, false]).unwrap();
    assert_eq!(ap, 1.0);
    assert_eq!(average_precision(&[0.3, 0.4], &[false, false]), Err(MetricsError::NoPositives));
}

#[test]
fn tied_scores_share_one_threshold() {
    // One tie group holding a positive and a negative: precision 1/2 at full recall.
    let ap = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
    assert_eq!(ap, 0.5);
}

#[test]
fn ap_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut done = 0;
    while done < 1000 {
        let m = rng.gen_range(1..=12);
        // Coarse grid so ties are common.
        let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.4)).collect();
        if !labels.iter().any(|&l| l) {
            continue;
        }
        let got = average_precision(&scores, &labels).unwrap();
        let want = brute_force_ap(&scores, &labels);
        assert!((got - want).abs() < 1e-12, "{scores:?} {labels:?}: {got} vs {want}");
        done += 1;
    }
}

#[test]
fn confusion_examples() {
    let c = confusion_matrix(&[0, 1, 1], &[0, 0, 1], 3).unwrap();
    assert_eq!(c.rows[0], Some(vec![50.0, 50.0, 0.0]));
    assert_eq!(c.rows[1], Some(vec![0.0, 100.0, 0.0]));
    assert_eq!(c.rows[2], None);

    let truth = [0, 1, 2, 2, 1];
    let c = confusion_matrix(&truth, &truth, 3).unwrap();
    for i in 0..3 {
        let mut want = vec![0.0; 3];
        want[i] = 100.0;
        assert_eq!(c.rows[i], Some(want));
    }
    let c = confusion_matrix(&[2; 5], &truth, 3).unwrap();
    for row in c.rows.iter().flatten() {
        assert_eq!(row, &vec![0.0, 0.0, 100.0]);
    }
    assert!(confusion_matrix(&[3], &[0], 3).is_err());
}

#[test]
fn precision_recall_examples() {
    let pr = precision_recall(&[1, 2, 2], &[1, 1, 2], 2).unwrap();
    assert_eq!((pr.precision, pr.recall), (0.5, 1.0));
    let pr = precision_recall(&[0, 1, 2], &[0, 1, 2], 1).unwrap();
    assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
    let pr = precision_recall(&[0, 0, 1], &[2, 0, 1], 2).unwrap();
    assert_eq!((pr.precision, pr.recall, pr.no_predictions), (0.0, 0.0, true));
    assert_eq!(precision_recall(&[0], &[0], 2), Err(MetricsError::ClassAbsent(2)));
}

/// Logits whose NLL-optimal temperature is close to 1: labels are drawn
/// from the softmax of the logits themselves.
fn calibrated_sample(seed: u64, m: usize) -> (Vec<[f64; 3]>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let l = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let p = calibrated_probs(&l, 1.0);
        let u: f64 = rng.gen();
        let y = if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 };
        logits.push(l);
        labels.push(y);
    }
    (logits, labels)
}

#[test]
fn temperature_near_one_for_calibrated_logits() {
    let (logits, labels) = calibrated_sample(1, 20_000);
    let r = fit_temperature(&logits, &labels).unwrap();
    assert!((r.temperature - 1.0).abs() < 0.05, "T = {}", r.temperature);
    assert!(r.nll_after <= r.nll_before + 1e-9);
}

#[test]
fn scaled_logits_recover_the_scale() {
    let (logits, labels) = calibrated_sample(2, 20_000);
    let base = fit_temperature(&logits, &labels).unwrap().temperature;
    let doubled: Vec<[f64; 3]> = logits.iter().map(|l| l.map(|v| 2.0 * v)).collect();
    let t = fit_temperature(&doubled, &labels).unwrap().temperature;
    assert!((t - 2.0).abs() < 0.05, "T = {t}");
    assert!((t - 2.0 * base).abs() < 1e-3, "{t} vs 2·{base}");
}

#[test]
fn confident_single_sample_pushes_t_to_lower_bound() {
    let r = fit_temperature(&[[4.0, 0.0, -1.0]], &[0]).unwrap();
    assert!(r.temperature < T_MIN + 1e-3, "T = {}", r.temperature);
    assert!(r.nll_after < r.nll_before);
}

#[test]
fn evaluate_reduced_tasks() {
    let probs = [
        [0.8, 0.1, 0.1],
        [0.1, 0.7, 0.2],
        [0.1, 0.3, 0.6],
        [0.2, 0.5, 0.3],
    ];
    let truth = [0, 1, 2, 2];
    let osd = evaluate(&probs, &truth, Task::Osd, 0.0).unwrap();
    // OSD positive scores 0.1, 0.2, 0.6, 0.3 with positives at 0.6 and 0.3.
    assert_eq!(osd.map, Some(1.0));
    assert_eq!(osd.confusion.rows[1], Some(vec![50.0, 50.0]));
    let vad = evaluate(&probs, &truth, Task::Vad, 0.0).unwrap();
    assert_eq!(vad.accuracy, 1.0);
    assert_eq!(vad.map, Some(1.0));
    let csd = evaluate(&probs, &truth, Task::Csd, 0.0).unwrap();
    assert_eq!(csd.accuracy, 0.75);
    let json = serde_json::to_string(&csd).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, csd);
}

proptest! {
    #[test]
    fn temperature_never_changes_argmax(
        logits in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..40),
        t in 0.05f64..20.0,
    ) {
        for l in &logits {
            let a = calibrated_probs(l, 1.0);
            let b = calibrated_probs(l, t);
            prop_assert_eq!(apply_policy(&a, 0.0), apply_policy(&b, 0.0));
        }
    }

    #[test]
    fn fitted_nll_never_exceeds_t1(
        rows in prop::collection::vec((prop::array::uniform3(-8.0f64..8.0), 0u8..3), 1..60),
    ) {
        let (logits, labels): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let r = fit_temperature(&logits, &labels).unwrap();
        prop_assert!(r.nll_after <= r.nll_before + 1e-9);
        prop_assert!(r.temperature >= T_MIN && r.temperature <= T_MAX);
        for l in &logits {
            prop_assert_eq!(
                apply_policy(&calibrated_probs(l, 1.0), 0.0),
                apply_policy(&calibrated_probs(l, r.temperature), 0.0)
            );
        }
    }

    #[test]
    fn confusion_rows_sum_to_100(
        pairs in prop::collection::vec((0u8..3, 0u8..3), 1..200),
    ) {
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let c = confusion_matrix(&pred, &truth, 3).unwrap();
        for row in c.rows.iter().flatten() {
            prop_assert!((row.iter().sum::<f64>() - 100.0).abs() <= 0.1);
        }
    }

    #[test]
    fn reductions_keep_length_and_range(
        rows in prop::collection::vec((prop::array::uniform3(-5.0f64..5.0), 0u8..3), 0..50),
    ) {
        let probs: Vec<[f64; 3]> = rows.iter().map(|(l, _)| calibrated_probs(l, 1.0)).collect();
        let labels: Vec<u8> = rows.iter().map(|(_, y)| *y).collect();
        for task in [Task::Vad, Task::Osd] {
            let (s, l) = reduce_to_task(&probs, &labels, task);
            prop_assert_eq!(s.len(), probs.len());
            prop_assert_eq!(l.len(), probs.len());
            prop_assert!(s.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        }
    }
}

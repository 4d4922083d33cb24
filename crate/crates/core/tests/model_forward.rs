use csd_core::featext::{SegmentTensor, FREQ_BINS, SEGMENT_FRAMES};
use csd_core::model::{CsdModel, MergeType, ModelConfig, ModelError};
use csd_core::numcore::check::{relative_error, FD_STEP};
use csd_core::numcore::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(merge: MergeType, channels: usize) -> ModelConfig {
    ModelConfig {
        channels,
        embed_dim: 32,
        depth: 2,
        heads: 4,
        merge_type: merge,
        ..ModelConfig::desk()
    }
}

fn random_input(seed: u64, batch: usize, channels: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * channels * FREQ_BINS * SEGMENT_FRAMES;
    Tensor::new(
        vec![batch, channels, FREQ_BINS, SEGMENT_FRAMES],
        (0..n).map(|_| rng.gen_range(-8.0..2.0)).collect(),
    )
    .unwrap()
}

fn segment(data: Tensor) -> SegmentTensor {
    let s = data.shape().to_vec();
    SegmentTensor {
        data: data.reshape(&s[1..]).unwrap(),
        start_time: 0.0,
    }
}

/// Stacks per-channel planes of a single-sample input in a new order.
fn reorder_channels(x: &Tensor, order: &[usize]) -> Tensor {
    let plane = FREQ_BINS * SEGMENT_FRAMES;
    let mut data = Vec::new();
    for &c in order {
        data.extend_from_slice(&x.data()[c * plane..(c + 1) * plane]);
    }
    Tensor::new(vec![1, order.len(), FREQ_BINS, SEGMENT_FRAMES], data).unwrap()
}

#[test]
fn forward_shape_and_finiteness() {
    let m = CsdModel::new(tiny(MergeType::Concat, 2), 7).unwrap();
    let logits = m.logits(&random_input(1, 3, 2)).unwrap();
    assert_eq!(logits.len(), 3);
    assert!(logits.iter().flatten().all(|v| v.is_finite()));
    let single = m.forward(&segment(random_input(1, 1, 2))).unwrap();
    assert_eq!(single, logits[0]);
}

#[test]
fn zero_inputs_with_zero_tokens_give_identical_logits() {
    let mut m = CsdModel::new(tiny(MergeType::Concat, 2), 7).unwrap();
    let w = m.weights_mut();
    w.cls_token = Tensor::zeros(w.cls_token.shape());
    w.pos_embedding = Tensor::zeros(w.pos_embedding.shape());
    let zeros = Tensor::zeros(&[2, 2, FREQ_BINS, SEGMENT_FRAMES]);
    let l = m.logits(&zeros).unwrap();
    assert_eq!(l[0], l[1]);
    assert_eq!(m.logits(&zeros).unwrap(), l);
}

#[test]
fn single_channel_merge_types_are_bit_identical() {
    let x = random_input(3, 2, 1);
    let models: Vec<CsdModel> = [MergeType::Concat, MergeType::Sum, MergeType::SharedAvg]
        .into_iter()
        .map(|mt| CsdModel::new(tiny(mt, 1), 11).unwrap())
        .collect();
    assert_eq!(models[0].weights(), models[1].weights());
    assert_eq!(models[0].weights(), models[2].weights());
    let outs: Vec<Vec<[f64; 3]>> = models.iter().map(|m| m.logits(&x).unwrap()).collect();
    for o in &outs[1..] {
        for (a, b) in o.iter().flatten().zip(outs[0].iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn shared_average_of_duplicated_channel_equals_single_channel() {
    let m = CsdModel::new(tiny(MergeType::SharedAvg, 1), 5).unwrap();
    let x = random_input(4, 1, 1);
    let dup = reorder_channels(&x, &[0, 0]);
    let a = m.embed(&segment(x)).unwrap();
    let b = m.embed(&segment(dup)).unwrap();
    assert_eq!(a.shape(), b.shape());
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-15);
    }
}

#[test]
fn shared_average_is_permutation_invariant() {
    let m = CsdModel::new(tiny(MergeType::SharedAvg, 3), 5).unwrap();
    let x = random_input(6, 1, 3);
    let base = m.embed(&segment(x.clone())).unwrap();
    for order in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
        let perm = m.embed(&segment(reorder_channels(&x, &order))).unwrap();
        for (p, q) in base.data().iter().zip(perm.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn concat_permutation_reorders_token_blocks() {
    let mut m = CsdModel::new(tiny(MergeType::Concat, 2), 5).unwrap();
    let shared = m.weights().embeddings[0].clone();
    m.weights_mut().embeddings[1] = shared;
    let x = random_input(8, 1, 2);
    let a = m.embed(&segment(x.clone())).unwrap();
    let b = m.embed(&segment(reorder_channels(&x, &[1, 0]))).unwrap();
    assert_eq!(a.shape(), &[50, 32]);
    let block = 25 * 32;
    assert_eq!(&a.data()[..block], &b.data()[block..]);
    assert_eq!(&a.data()[block..], &b.data()[..block]);
    assert_ne!(a, b);
}

#[test]
fn shared_average_accepts_any_channel_count() {
    let m = CsdModel::new(tiny(MergeType::SharedAvg, 2), 5).unwrap();
    assert!(m.logits(&random_input(1, 1, 4)).is_ok());
    assert!(m.logits(&random_input(1, 1, 1)).is_ok());
}

#[test]
fn bound_merge_types_reject_channel_mismatch() {
    for mt in [MergeType::Concat, MergeType::Sum] {
        let m = CsdModel::new(tiny(mt, 2), 5).unwrap();
        let err = m.logits(&random_input(1, 1, 3)).unwrap_err();
        match err {
            ModelError::ChannelMismatch { expected: 2, found: 3, merge } => assert_eq!(merge, mt),
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let m = CsdModel::new(tiny(MergeType::Concat, 2), 9).unwrap();
    let mut tape = Tape::new();
    let w = m.bind_frozen(&mut tape).unwrap();
    let (_, attn) = m.forward_traced(&mut tape, &w, &random_input(2, 2, 2)).unwrap();
    assert_eq!(attn.len(), 2);
    for a in attn {
        assert_eq!(tape.shape(a), &[2 * 4, 51, 51]);
        for row in tape.value(a).data().chunks(51) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let m = CsdModel::new(tiny(MergeType::Sum, 2), 1).unwrap();
    let x = random_input(3, 2, 2);
    assert_eq!(m.logits(&x).unwrap(), m.logits(&x).unwrap());
}

#[test]
fn model_gradient_matches_finite_differences() {
    let m = CsdModel::new(tiny(MergeType::Concat, 2), 13).unwrap();
    let x = random_input(5, 2, 2);
    let proj = [0.7, -1.3, 0.4, 1.1, -0.2, 0.9];
    let objective = |model: &CsdModel| -> f64 {
        model
            .logits(&x)
            .unwrap()
            .iter()
            .flatten()
            .zip(proj)
            .map(|(l, p)| l * p)
            .sum()
    };

    let mut tape = Tape::new();
    let w = m.bind(&mut tape).unwrap();
    let logits = m.forward_batch(&mut tape, &w, &x).unwrap();
    let c = tape.constant(Tensor::new(vec![2, 3], proj.to_vec()).unwrap()).unwrap();
    let prod = tape.mul(logits, c).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = w.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n_tensors = analytic.len();
    for _ in 0..25 {
        let ti = rng.gen_range(0..n_tensors);
        let ei = rng.gen_range(0..analytic[ti].len());
        let mut plus = m.clone();
        plus.weights_mut().tensors_mut()[ti].data_mut()[ei] += FD_STEP;
        let mut minus = m.clone();
        minus.weights_mut().tensors_mut()[ti].data_mut()[ei] -= FD_STEP;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
        let err = relative_error(analytic[ti].data()[ei], numeric);
        assert!(err < 1e-4, "tensor {ti} elem {ei}: {} vs {numeric}", analytic[ti].data()[ei]);
    }
}

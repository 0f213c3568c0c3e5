use std::collections::HashSet;

use imbalance_kit::checkpoint::{parse_checkpoint, Checkpoint};
use imbalance_kit::data::{
    parse_embeddings, parse_frame_sequences, write_embeddings, write_frame_sequences,
    ClassDistribution, EmbeddingDataset, FrameSequence, LabelSpace, PredictionRecord, Sample,
};
use imbalance_kit::ensemble::{
    majority_vote, parse_predictions_csv, write_predictions_csv, VoteTable,
};
use imbalance_kit::losses::{class_weights, LossConfig};
use imbalance_kit::metrics::{balanced_subset, f1_report};
use imbalance_kit::model::{
    Architecture, ClassifierModel, Input, Layer, LinearLayer, LoraLinear, LoraSpec,
};
use imbalance_kit::pooling::{attentive_pool_forward, AttentivePoolParams};
use imbalance_kit::rng::{stream_rng, Stream};
use imbalance_kit::verify::{model_gradcheck, pooling_gradcheck, TOLERANCE};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn batch() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, Vec<u64>)> {
    (1usize..6, 2usize..6).prop_flat_map(|(b, c)| {
        (
            prop::collection::vec(-8.0f64..8.0, b * c),
            prop::collection::vec(0..c, b),
            prop::collection::vec(1u64..300, c),
        )
            .prop_map(move |(z, t, n)| (Array2::from_shape_vec((b, c), z).unwrap(), t, n))
    })
}

fn all_losses() -> [LossConfig; 4] {
    [
        LossConfig::ce(),
        LossConfig::wce(),
        LossConfig::wfl(2.0),
        LossConfig::vs(0.3, 1.0),
    ]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reductions_to_wce((z, t, n) in batch()) {
        let dist = ClassDistribution::new(n).unwrap();
        let w = class_weights(&dist);
        let wce = LossConfig::wce().evaluate(z.view(), &t, &w, &dist).unwrap();
        for other in [LossConfig::wfl(0.0), LossConfig::vs(0.0, 0.0)] {
            let r = other.evaluate(z.view(), &t, &w, &dist).unwrap();
            prop_assert!((r.value - wce.value).abs() <= 1e-12);
            prop_assert!(max_abs_diff(r.grad.as_slice().unwrap(), wce.grad.as_slice().unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn wce_gradient_rows_sum_to_zero((z, t, n) in batch()) {
        let dist = ClassDistribution::new(n).unwrap();
        let r = LossConfig::wce().evaluate(z.view(), &t, &class_weights(&dist), &dist).unwrap();
        for row in r.grad.rows() {
            prop_assert!(row.sum().abs() <= 1e-12);
        }
    }

    #[test]
    fn class_weights_reproduce_total(n in prop::collection::vec(1u64..10_000, 2..10)) {
        let dist = ClassDistribution::new(n.clone()).unwrap();
        let w = class_weights(&dist);
        let total: f64 = n.iter().zip(w.as_slice()).map(|(&c, &w)| c as f64 * w).sum();
        let expected = dist.total() as f64;
        prop_assert!((total - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn shift_invariance((z, t, n) in batch(), shift in -5.0f64..5.0) {
        let dist = ClassDistribution::new(n).unwrap();
        let w = class_weights(&dist);
        let shifted = &z + shift;
        for loss in [LossConfig::ce(), LossConfig::wce(), LossConfig::wfl(2.0), LossConfig::vs(0.0, 1.0)] {
            let a = loss.evaluate(z.view(), &t, &w, &dist).unwrap();
            let b = loss.evaluate(shifted.view(), &t, &w, &dist).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-10 * a.value.abs().max(1.0));
        }
    }

    #[test]
    fn loss_falls_as_true_logit_rises((z, t, n) in batch(), step in 0.01f64..2.0) {
        let dist = ClassDistribution::new(n).unwrap();
        let w = class_weights(&dist);
        let mut raised = z.clone();
        raised[[0, t[0]]] += step;
        for loss in all_losses() {
            let a = loss.evaluate(z.view(), &t, &w, &dist).unwrap().value;
            let b = loss.evaluate(raised.view(), &t, &w, &dist).unwrap().value;
            prop_assert!(b <= a, "{loss:?}: {a} -> {b}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences((z, t, n) in batch()) {
        let dist = ClassDistribution::new(n).unwrap();
        let w = class_weights(&dist);
        for loss in all_losses() {
            let err = imbalance_kit::losses::gradcheck(&loss, z.view(), &t, &w, &dist, 1e-6).unwrap();
            prop_assert!(err < TOLERANCE, "{loss:?}: {err}");
        }
    }
}

fn frames_strategy() -> impl Strategy<Value = Array2<f64>> {
    (1usize..7, 1usize..5).prop_flat_map(|(t, d)| {
        prop::collection::vec(-3.0f64..3.0, t * d)
            .prop_map(move |v| Array2::from_shape_vec((t, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pooling_ignores_frame_order(frames in frames_strategy(), seed in 0u64..1000) {
        let params = AttentivePoolParams::init(frames.ncols(), 3, &mut stream_rng(seed, Stream::Init, 0));
        let a = attentive_pool_forward(frames.view(), &params).unwrap();
        let mut reversed = frames.clone();
        reversed.invert_axis(ndarray::Axis(0));
        let b = attentive_pool_forward(reversed.view(), &params).unwrap();
        prop_assert!(max_abs_diff(a.embedding().as_slice().unwrap(), b.embedding().as_slice().unwrap()) <= 1e-12);
        prop_assert!((a.attention.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn pooling_gradients_match_finite_differences(frames in frames_strategy(), seed in 0u64..1000) {
        let d = frames.ncols();
        let mut rng = stream_rng(seed, Stream::Check, 0);
        let mut params = AttentivePoolParams::init(d, 4, &mut rng);
        params.score_vector = Array1::from_shape_fn(4, |i| 0.5 - 0.3 * i as f64);
        let upstream = Array1::from_shape_fn(2 * d, |i| 1.0 - 0.25 * i as f64);
        // frames too close to the variance floor have a kinked objective
        let centred = &frames - &frames.mean_axis(ndarray::Axis(0)).unwrap();
        prop_assume!(centred.iter().any(|v| v.abs() > 1e-2) || frames.nrows() == 1);
        prop_assume!(frames.nrows() == 1 || centred.columns().into_iter().all(|c| c.iter().any(|v| v.abs() > 1e-2)));
        let err = pooling_gradcheck(&frames, &params, &upstream, 1e-6, false).unwrap();
        prop_assert!(err < TOLERANCE, "{err}");
    }

    #[test]
    fn model_gradients_match_finite_differences(seed in 0u64..1000, hidden in 1usize..6, lora in any::<bool>()) {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let arch = Architecture {
            hidden,
            pooling: None,
            lora: lora.then_some(LoraSpec { rank: 2, alpha: 4.0, dropout: 0.2 }),
        };
        let model = ClassifierModel::build(&arch, 4, 3, &mut rng).unwrap();
        let x = Array1::from_shape_fn(4, |i| (seed as f64 * 0.37 + i as f64).sin());
        let upstream = Array1::from_vec(vec![0.7, -1.1, 0.4]);
        let err = model_gradcheck(&model, Input::Vector(x.view()), &upstream, Some(seed), 1e-6, false).unwrap();
        prop_assert!(err < TOLERANCE, "{err}");
    }

    #[test]
    fn lora_merge_matches_forward(seed in 0u64..1000, rank in 1usize..4, x in prop::collection::vec(-2.0f64..2.0, 5)) {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let base = LinearLayer::init(5, 3, &mut rng);
        let fresh = LoraLinear::init(base.clone(), rank, 8.0, 0.0, &mut rng).unwrap();
        let x = Array1::from_vec(x);
        // zero-initialised B leaves the base map untouched
        prop_assert!(max_abs_diff(fresh.merged().weight.as_slice().unwrap(), base.weight.as_slice().unwrap()) == 0.0);
        let up = Array2::from_shape_fn((3, rank), |(i, j)| ((i * 7 + j) as f64 * 0.31).cos());
        let lora = LoraLinear::new(base, fresh.down.clone(), up, 8.0, 0.0).unwrap();
        let model = ClassifierModel::new(vec![Layer::Lora(lora.clone())]).unwrap();
        let via_adapter = model.forward(Input::Vector(x.view())).unwrap();
        let via_merge = lora.merged().forward(x.view());
        prop_assert!(max_abs_diff(via_adapter.as_slice().unwrap(), via_merge.as_slice().unwrap()) <= 1e-12);
    }
}

fn labelled(c: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((0..c, 0..c), 1..60).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn macro_f1_is_order_free_and_bounded((truth, pred) in labelled(4), rot in 0usize..60) {
        let a = f1_report(&truth, &pred, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.macro_f1));
        let k = rot % truth.len();
        let mut t2 = truth.clone();
        let mut p2 = pred.clone();
        t2.rotate_left(k);
        p2.rotate_left(k);
        let b = f1_report(&t2, &p2, 4).unwrap();
        prop_assert_eq!(a.macro_f1, b.macro_f1);
    }

    #[test]
    fn perfect_predictions_score_one(truth in prop::collection::vec(0usize..3, 1..40)) {
        prop_assume!((0..3).all(|c| truth.contains(&c)));
        prop_assert_eq!(f1_report(&truth, &truth, 3).unwrap().macro_f1, 1.0);
    }

    #[test]
    fn binary_label_swap_keeps_macro_f1((truth, pred) in labelled(2)) {
        let a = f1_report(&truth, &pred, 2).unwrap().macro_f1;
        let flip = |v: &[usize]| v.iter().map(|&l| 1 - l).collect::<Vec<_>>();
        let b = f1_report(&flip(&truth), &flip(&pred), 2).unwrap().macro_f1;
        prop_assert!((a - b).abs() <= 1e-15);
    }

    #[test]
    fn balanced_subset_is_a_balanced_subset(counts in prop::collection::vec(1usize..20, 2..5), seed in 0u64..1000, k in 1usize..20) {
        let per_class = k.min(*counts.iter().min().unwrap());
        let labels = LabelSpace::new((0..counts.len()).map(|c| format!("c{c}"))).unwrap();
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample { id: format!("{c}-{i}"), features: vec![i as f64], label: c });
            }
        }
        let ds = EmbeddingDataset::new(samples).unwrap();
        let sub = balanced_subset(&ds, &labels, per_class, seed).unwrap();
        prop_assert_eq!(sub.len(), per_class * counts.len());
        for c in 0..counts.len() {
            prop_assert_eq!(sub.labels().filter(|&l| l == c).count(), per_class);
        }
        let ids: Vec<&str> = ds.samples().iter().map(|s| s.id.as_str()).collect();
        let positions: Vec<usize> = sub.samples().iter().map(|s| ids.iter().position(|&i| i == s.id).unwrap()).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]), "input order kept");
        let again = balanced_subset(&ds, &labels, per_class, seed).unwrap();
        prop_assert_eq!(again.samples(), sub.samples());
    }
}

fn table_from(votes: &[Vec<usize>], order: &[usize], classes: usize) -> VoteTable {
    let mut records = Vec::new();
    for &m in order {
        for (s, v) in votes[m].iter().enumerate() {
            records.push(PredictionRecord {
                sample_id: format!("s{s:03}"),
                model_id: format!("m{m}"),
                label: *v,
                probabilities: None,
            });
        }
    }
    VoteTable::new(records, Some(classes)).unwrap()
}

fn vote_matrix(models: usize, classes: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    (1usize..30)
        .prop_flat_map(move |n| prop::collection::vec(prop::collection::vec(0..classes, n), models))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn odd_binary_committees_never_tie(votes in vote_matrix(5, 2)) {
        let table = table_from(&votes, &[0, 1, 2, 3, 4], 2);
        let models: Vec<&str> = table.models().iter().map(String::as_str).collect();
        let fused = majority_vote(&table, &models, "m2").unwrap();
        prop_assert!(fused.ties().all(|t| !t));
    }

    #[test]
    fn fusion_ignores_record_order(votes in vote_matrix(4, 3), tb in 0usize..4) {
        let a = table_from(&votes, &[0, 1, 2, 3], 3);
        let b = table_from(&votes, &[3, 1, 0, 2], 3);
        let tb = format!("m{tb}");
        let ma: Vec<&str> = a.models().iter().map(String::as_str).collect();
        let mb: Vec<&str> = b.models().iter().map(String::as_str).collect();
        prop_assert_eq!(majority_vote(&a, &ma, &tb).unwrap().labels, majority_vote(&b, &mb, &tb).unwrap().labels);
    }

    #[test]
    fn relabelling_commutes_with_fusion(votes in vote_matrix(3, 3), tb in 0usize..3) {
        // an order-preserving relabelling keeps the lowest-index rule intact
        let perm = [0usize, 2, 4];
        let relabelled: Vec<Vec<usize>> = votes.iter().map(|v| v.iter().map(|&l| perm[l]).collect()).collect();
        let tb = format!("m{tb}");
        let a = table_from(&votes, &[0, 1, 2], 3);
        let b = table_from(&relabelled, &[0, 1, 2], 5);
        let models: Vec<&str> = a.models().iter().map(String::as_str).collect();
        let fa = majority_vote(&a, &models, &tb).unwrap();
        let fb = majority_vote(&b, &models, &tb).unwrap();
        let mapped: Vec<usize> = fa.labels.iter().map(|&l| perm[l]).collect();
        prop_assert_eq!(mapped, fb.labels);
    }

    #[test]
    fn predictions_csv_round_trip(votes in vote_matrix(2, 4), p in prop::collection::vec(0.001f64..1.0, 4)) {
        let s: f64 = p.iter().sum();
        let probs: Vec<f64> = p.iter().map(|v| v / s).collect();
        let mut records = Vec::new();
        for (m, vs) in votes.iter().enumerate() {
            for (i, &v) in vs.iter().enumerate() {
                records.push(PredictionRecord { sample_id: format!("s{i}"), model_id: format!("m{m}"), label: v, probabilities: Some(probs.clone()) });
            }
        }
        let mut buf = Vec::new();
        write_predictions_csv(&records, &mut buf).unwrap();
        prop_assert_eq!(parse_predictions_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), records);
    }

    #[test]
    fn embeddings_round_trip(rows in prop::collection::vec((0usize..3, prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3)), 1..20)) {
        let labels = LabelSpace::new(["neutral", "happy", "sad"]).unwrap();
        let samples: Vec<Sample> = rows.into_iter().enumerate()
            .map(|(i, (label, features))| Sample { id: format!("u{i}"), features, label })
            .collect();
        let ds = EmbeddingDataset::new(samples).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&ds, &labels, &mut buf).unwrap();
        let back = parse_embeddings(std::str::from_utf8(&buf).unwrap(), &labels).unwrap();
        prop_assert_eq!(back.samples(), ds.samples());
    }

    #[test]
    fn frame_sequences_round_trip(seqs in prop::collection::vec((0usize..2, frames_strategy()), 1..6)) {
        prop_assume!(seqs.iter().all(|(_, f)| f.ncols() == seqs[0].1.ncols()));
        let labels = LabelSpace::new(["a", "b"]).unwrap();
        let seqs: Vec<FrameSequence> = seqs.into_iter().enumerate()
            .map(|(i, (label, frames))| FrameSequence { id: format!("f{i}"), frames, label })
            .collect();
        let mut buf = Vec::new();
        write_frame_sequences(&seqs, &labels, &mut buf).unwrap();
        let back = parse_frame_sequences(std::str::from_utf8(&buf).unwrap(), &labels, 1000).unwrap();
        prop_assert_eq!(back, seqs);
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..10_000, pooled in any::<bool>(), lora in any::<bool>()) {
        let arch = Architecture {
            hidden: 3,
            pooling: pooled.then_some(2),
            lora: lora.then_some(LoraSpec { rank: 2, alpha: 4.0, dropout: 0.1 }),
        };
        let model = ClassifierModel::build(&arch, 4, 3, &mut stream_rng(seed, Stream::Init, 0)).unwrap();
        let ckpt = Checkpoint {
            labels: LabelSpace::new(["x", "y", "z"]).unwrap(),
            model,
            val_macro_f1: seed as f64 / 9973.0,
            epoch: 1 + (seed % 20) as usize,
            seed: Some(seed),
            config_hash: None,
        };
        let text = ckpt.to_json();
        let back = parse_checkpoint(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back, ckpt);
    }
}

#[test]
fn vote_table_orders_models_and_samples() {
    let votes = vec![vec![0, 1, 2], vec![1, 1, 0]];
    let table = table_from(&votes, &[1, 0], 3);
    assert_eq!(table.models(), ["m0", "m1"]);
    let ids: HashSet<&str> = table.samples().iter().map(String::as_str).collect();
    assert_eq!(ids.len(), 3);
    assert_eq!(table.samples()[0], "s000");
}

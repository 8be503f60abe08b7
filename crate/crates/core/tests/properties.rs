mod common;

use common::*;
use figcap::dataset::{
    self, batch, ScicapRecord, TokenizedExample, Vocabulary, PAD, SPECIAL_TOKENS,
};
use figcap::features::{decode_features, encode_features};
use figcap::metrics::{bleu4_corpus, bleu4_sentence, Smoothing};
use figcap::model::checkpoint::{decode_tensors, encode_tensors};
use figcap::model::{CaptionModel, Parameters};
use figcap::tensor::{Graph, Tensor};
use figcap::training::{clip_gradients, lr_schedule};
use proptest::prelude::*;

fn record(id: usize, text: String) -> ScicapRecord {
    ScicapRecord {
        id: format!("r{id}"),
        figure_text: text,
        abstract_text: String::new(),
        caption: "a caption".into(),
        feature_ref: String::new(),
    }
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "loss", "accuracy", "epoch", "model", "of", "the", "x", "Y",
    ])
    .prop_map(String::from)
}

fn params_with_grads(values: &[Vec<f64>]) -> Parameters {
    let mut model = CaptionModel::new(tiny_config(), 0).unwrap();
    model.params.zero_grad();
    let grads: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .zip(values.iter().cycle())
        .map(|((n, t), v)| {
            (
                n.to_string(),
                (0..t.numel()).map(|i| v[i % v.len()]).collect(),
            )
        })
        .collect();
    model.params.accumulate_grads(grads).unwrap();
    model.params
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, xs in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let width = xs.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| xs.iter().map(move |x| x * (r + 1) as f64)).collect();
        let g = Graph::new();
        let y = g.constant(Tensor::new(vec![rows, width], data).unwrap()).softmax().tensor();
        for r in 0..rows {
            let row = y.row_slice(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_norm_and_preserves_direction(
        values in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..6), 1..5),
        clip in 1e-3f64..100.0,
    ) {
        let mut params = params_with_grads(&values);
        let before: Vec<f64> = params.iter().flat_map(|(_, t)| t.grad().unwrap().to_vec()).collect();
        let norm = params.grad_norm();
        let scale = clip_gradients(&mut params, clip);
        let after: Vec<f64> = params.iter().flat_map(|(_, t)| t.grad().unwrap().to_vec()).collect();
        prop_assert!(params.grad_norm() <= clip.max(norm));
        if norm <= clip {
            prop_assert_eq!(scale, 1.0);
            prop_assert_eq!(before, after);
        } else {
            prop_assert!(params.grad_norm() <= clip);
            for (b, a) in before.iter().zip(&after) {
                prop_assert!((b * scale - a).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn bleu_is_bounded_and_one_on_identity(
        cand in prop::collection::vec(0u8..6, 0..14),
        reference in prop::collection::vec(0u8..6, 1..14),
    ) {
        for s in [Smoothing::None, Smoothing::Epsilon] {
            let b = bleu4_sentence(&cand, &reference, s).bleu4;
            prop_assert!((0.0..=1.0).contains(&b));
            if reference.len() >= 4 {
                prop_assert!((bleu4_sentence(&reference, &reference, s).bleu4 - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corpus_bleu_ignores_pair_order(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..5, 0..10), prop::collection::vec(0u8..5, 1..10)), 1..8),
        rot in 0usize..8,
    ) {
        let mut shuffled = pairs.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        for s in [Smoothing::None, Smoothing::Epsilon] {
            let a = bleu4_corpus(&pairs, s).unwrap().bleu4;
            let b = bleu4_corpus(&shuffled, s).unwrap().bleu4;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - brute_bleu(&pairs, s == Smoothing::Epsilon)).abs() < 1e-9);
        }
    }

    #[test]
    fn cleaning_is_idempotent_and_monotone(
        texts in prop::collection::vec(prop::collection::vec(word(), 0..4).prop_map(|w| w.join(" ")), 0..12),
        lo in 0usize..6,
        extra in 0usize..6,
    ) {
        let records: Vec<_> = texts.into_iter().enumerate().map(|(i, t)| record(i, t)).collect();
        let (kept, report) = dataset::clean(records.clone(), lo);
        prop_assert_eq!(report.kept_count + report.removed_ids.len(), records.len());
        let (again, _) = dataset::clean(kept.clone(), lo);
        prop_assert_eq!(&again, &kept);
        let (stricter, _) = dataset::clean(records.clone(), lo + extra);
        prop_assert!(stricter.len() <= kept.len());
        prop_assert!(stricter.iter().all(|r| kept.contains(r)));
        // Survivors keep their input order.
        let positions: Vec<usize> = kept.iter().map(|k| records.iter().position(|r| r == k).unwrap()).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn vocabulary_round_trips_in_vocab_text(
        texts in prop::collection::vec(prop::collection::vec(word(), 1..6).prop_map(|w| w.join(" ")), 1..6),
    ) {
        let records: Vec<_> = texts.iter().cloned().enumerate().map(|(i, t)| record(i, t)).collect();
        let vocab = Vocabulary::build(&records, 1, 1000).unwrap();
        prop_assert_eq!(&vocab.tokens()[..5], &SPECIAL_TOKENS.map(String::from)[..]);
        for t in &texts {
            let ids = vocab.encode_text(t, 100);
            prop_assert_eq!(vocab.decode(&ids), dataset::tokenize(t).join(" "));
            let cap = vocab.encode_caption(t, 100).unwrap();
            prop_assert_eq!(cap.len(), ids.len() + 2);
            prop_assert_eq!(vocab.decode(&cap), vocab.decode(&ids));
        }
        let dir = tempfile::tempdir().unwrap();
        vocab.save(dir.path().join("v.json")).unwrap();
        prop_assert_eq!(Vocabulary::load(dir.path().join("v.json")).unwrap(), vocab);
    }

    #[test]
    fn batch_masks_count_caption_tokens(
        lens in prop::collection::vec(3usize..10, 1..9),
        size in 1usize..5,
        seed in any::<u64>(),
    ) {
        let examples: Vec<TokenizedExample> = lens.iter().enumerate().map(|(i, &n)| TokenizedExample {
            id: format!("e{i}"),
            caption_ids: vec![7; n],
            figure_text_ids: vec![],
            abstract_ids: vec![],
            feature_ref: String::new(),
        }).collect();
        let batches = batch(&examples, size, PAD, seed).unwrap();
        prop_assert_eq!(batches.len(), lens.len().div_ceil(size));
        let mut ids: Vec<String> = Vec::new();
        for b in &batches {
            for (i, e) in b.examples.iter().enumerate() {
                prop_assert_eq!(b.mask[i].iter().filter(|&&m| m).count(), e.caption_len());
                prop_assert!(b.caption_ids[i][e.caption_len()..].iter().all(|&t| t == PAD));
                prop_assert_eq!(b.caption_ids[i].len(), b.width());
            }
            ids.extend(b.examples.iter().map(|e| e.id.clone()));
        }
        ids.sort();
        let mut want: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
        prop_assert_eq!(batch(&examples, size, PAD, seed).unwrap(), batches);
    }

    #[test]
    fn feature_bytes_round_trip(
        dim in 1usize..8,
        raw in prop::collection::vec((any::<u16>(), prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 8)), 0..6),
    ) {
        let mut seen = std::collections::HashSet::new();
        let pairs: Vec<(String, Vec<f64>)> = raw.into_iter()
            .filter(|(k, _)| seen.insert(*k))
            .map(|(k, v)| (format!("key-{k}"), v[..dim].iter().map(|&x| x as f64).collect()))
            .collect();
        let bytes = encode_features(&pairs, dim).unwrap();
        let back = decode_features(&bytes).unwrap();
        let again: Vec<_> = back.into_iter().collect();
        prop_assert_eq!(encode_features(&again, dim).unwrap(), bytes);
        prop_assert_eq!(again, pairs);
    }

    #[test]
    fn tensor_bytes_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..4),
        fill in any::<f32>().prop_filter("finite", |x| x.is_finite()),
    ) {
        let tensors: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
            let n: usize = s.iter().product();
            (format!("p{i}"), Tensor::new(s.clone(), (0..n).map(|j| (fill as f64) * j as f64 / n as f64).map(|x| x as f32 as f64).collect()).unwrap())
        }).collect();
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode_tensors(b"{}", &refs).unwrap();
        let (meta, map) = decode_tensors(&bytes).unwrap();
        prop_assert_eq!(meta, b"{}".to_vec());
        for (n, t) in &tensors {
            prop_assert_eq!(map.get(n).unwrap().data(), t.data());
            prop_assert_eq!(map.get(n).unwrap().shape(), t.shape());
        }
    }

    #[test]
    fn schedule_is_geometric(base in 1e-6f64..1.0, epoch in 0usize..40, decay in 0.01f64..1.0) {
        prop_assert_eq!(lr_schedule(base, epoch, decay), base * decay.powi(epoch as i32));
        prop_assert!(lr_schedule(base, epoch + 1, decay) <= lr_schedule(base, epoch, decay));
    }
}

#[test]
fn truncated_or_corrupt_feature_bytes_are_rejected() {
    let pairs = vec![
        ("a".to_string(), vec![1.0, 2.0]),
        ("b".to_string(), vec![3.0, 4.0]),
    ];
    let bytes = encode_features(&pairs, 2).unwrap();
    for cut in 0..bytes.len() {
        assert!(
            decode_features(&bytes[..cut]).is_err(),
            "accepted a {cut}-byte prefix"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_features(&bad).is_err());
    assert!(encode_features(&pairs, 3).is_err());
}

#[test]
fn truncated_checkpoint_bytes_are_rejected() {
    let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let bytes = encode_tensors(b"{\"a\":1}", &[("w", &t)]).unwrap();
    for cut in 0..bytes.len() {
        assert!(
            decode_tensors(&bytes[..cut]).is_err(),
            "accepted a {cut}-byte prefix"
        );
    }
}

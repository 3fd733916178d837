//! Property tests over the public numeric and corpus surfaces.

use proptest::prelude::*;

use docnmt::corpus::Vocabulary;
use docnmt::evaluation::bleu;
use docnmt::tensor::{layer_norm, softmax, Tensor};

fn finite_matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(lo..hi, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| finite_matrix(r, c, -50.0, 50.0))) {
        let y = softmax(&x, 1).unwrap();
        let (r, c) = y.dims2().unwrap();
        for i in 0..r {
            let mut sum = 0.0;
            for j in 0..c {
                let v = y.at2(i, j);
                prop_assert!(v >= 0.0);
                sum += v;
            }
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_centers_each_position(x in (2usize..8, 1usize..5).prop_flat_map(|(d, l)| finite_matrix(d, l, -10.0, 10.0))) {
        let (d, l) = x.dims2().unwrap();
        let gain = Tensor::new(vec![d], vec![1.0; d]).unwrap();
        let bias = Tensor::zeros(vec![d]);
        let y = layer_norm(&x, &gain, &bias).unwrap();
        for j in 0..l {
            let mean: f64 = (0..d).map(|i| y.at2(i, j)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-6, "column {j} mean {mean}");
        }
    }

    #[test]
    fn bleu_self_score_is_100(lines in proptest::collection::vec(
        proptest::collection::vec("[a-f]{1,3}", 1..8).prop_map(|ws| ws.join(" ")),
        1..6,
    )) {
        let report = bleu(&lines, &lines).unwrap();
        prop_assert!((report.score - 100.0).abs() < 1e-9);
        prop_assert!((report.brevity_penalty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vocabulary_round_trip_replaces_oov_with_unk(
        corpus_words in proptest::collection::vec("[a-d]{1,2}", 1..12),
        probe in proptest::collection::vec("[a-f]{1,2}", 1..8),
    ) {
        let sentences = [corpus_words.clone()];
        let refs: Vec<&[String]> = sentences.iter().map(|s| s.as_slice()).collect();
        let vocab = Vocabulary::build(refs.iter().copied(), 100).unwrap();
        let ids = vocab.encode(&probe);
        let back = vocab.decode_sentence(&ids).unwrap();
        for (orig, round) in probe.iter().zip(&back) {
            if corpus_words.contains(orig) {
                prop_assert_eq!(orig, round);
            } else {
                prop_assert_eq!(round.as_str(), "<unk>");
            }
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use actlab::attention::{causal_attention, decompose_output, AttentionVariantParams, ConcentrationSet};
use actlab::instrumentation::{
    detect_massive_in_state, detect_outlier_features, median_magnitude, top_k, DetectionProfile,
    OutlierThresholds,
};
use actlab::model::HiddenStateTrace;
use actlab::tensor::Tensor;
use proptest::prelude::*;

/// Values mostly small with a few large spikes, so both branches of the
/// detector are exercised.
fn state_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..9).prop_flat_map(|(t, d)| {
        prop::collection::vec(
            prop_oneof![
                8 => -2.0f64..2.0,
                1 => -5000.0f64..5000.0,
                1 => Just(0.0),
            ],
            t * d,
        )
        .prop_map(move |v| Tensor::matrix(t, d, v).unwrap())
    })
}

fn sorted_median(values: &[f64]) -> f64 {
    let mut m: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    m.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = m.len();
    if n % 2 == 1 {
        m[n / 2]
    } else {
        (m[n / 2 - 1] + m[n / 2]) / 2.0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn median_matches_sorting(state in state_strategy()) {
        prop_assert_eq!(median_magnitude(&state), sorted_median(state.data()));
    }

    #[test]
    fn detection_matches_brute_force(state in state_strategy(), abs in 1.0f64..200.0, ratio in 1.0f64..2000.0) {
        let profile = DetectionProfile { abs_threshold: abs, ratio_threshold: ratio };
        let found = detect_massive_in_state(&state, 0, &[], &profile).unwrap();
        let median = sorted_median(state.data());
        let mut expected = Vec::new();
        for r in 0..state.rows() {
            for c in 0..state.cols() {
                let m = state.at(r, c).abs();
                if m > abs && m >= ratio * median {
                    expected.push((r, c));
                }
            }
        }
        let mut got: Vec<(usize, usize)> = found.iter().map(|r| (r.token_index, r.feature_index)).collect();
        got.sort();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn detections_are_the_top_of_the_state(state in state_strategy()) {
        let profile = DetectionProfile { abs_threshold: 10.0, ratio_threshold: 10.0 };
        let found = detect_massive_in_state(&state, 0, &[], &profile).unwrap();
        let top = top_k(&state, found.len());
        let a: Vec<(usize, usize)> = found.iter().map(|r| (r.token_index, r.feature_index)).collect();
        let b: Vec<(usize, usize)> = top.iter().map(|e| (e.token_index, e.feature_index)).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn top_k_is_sorted_and_bounded(state in state_strategy(), k in 1usize..20) {
        let top = top_k(&state, k);
        prop_assert_eq!(top.len(), k.min(state.len()));
        for w in top.windows(2) {
            prop_assert!(w[0].magnitude >= w[1].magnitude);
        }
        if let Some(last) = top.last() {
            let above = state.data().iter().filter(|x| x.abs() > last.magnitude).count();
            prop_assert!(above < top.len() || top.len() == state.len());
        }
    }

    #[test]
    fn decomposition_parts_sum_to_output(
        t in 1usize..7,
        dh in 1usize..5,
        seed in any::<u64>(),
        mask in any::<u8>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |n: usize| Tensor::matrix(t, n, (0..t * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (q, k, v) = (m(dh), m(dh), m(dh));
        let kb: Vec<f64> = v.row(0).iter().map(|x| x * 0.5).collect();
        let vb: Vec<f64> = q.row(0).to_vec();
        let params = AttentionVariantParams::explicit_kv_bias(kb, vb);
        let (out, probs) = causal_attention(&q, &k, &v, &params).unwrap();
        let head = probs.head(0);
        for query in 0..t {
            let c = ConcentrationSet::new((0..=query).filter(|i| mask >> (i % 8) & 1 == 1));
            let parts = decompose_output(&head, &v, &params, &c, query).unwrap();
            for j in 0..dh {
                let sum = parts.bias_part[j] + parts.rest_part[j];
                prop_assert!((sum - out.at(query, j)).abs() <= 1e-12);
            }
        }
    }
}

/// Counting oracle for the outlier definition, written as one loop nest
/// per feature.
fn outlier_oracle(traces: &[HiddenStateTrace], th: &OutlierThresholds) -> Vec<usize> {
    let d = traces[0].states[0].cols();
    let mut out = Vec::new();
    for f in 0..d {
        let mut seqs = 0;
        for tr in traces {
            let blocks = &tr.states[1..];
            let mut layers = 0;
            for s in blocks {
                let mut tokens = 0;
                for r in 0..s.rows() {
                    if s.at(r, f).abs() > th.magnitude {
                        tokens += 1;
                    }
                }
                if tokens as f64 / s.rows() as f64 > th.token_frac {
                    layers += 1;
                }
            }
            if layers as f64 / blocks.len() as f64 > th.layer_frac {
                seqs += 1;
            }
        }
        if seqs as f64 / traces.len() as f64 > th.seq_frac {
            out.push(f);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn outlier_features_match_counting_oracle(
        n_seq in 1usize..5,
        n_states in 2usize..5,
        t in 1usize..6,
        d in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let traces: Vec<HiddenStateTrace> = (0..n_seq)
            .map(|_| HiddenStateTrace {
                states: (0..n_states)
                    .map(|_| {
                        let v = (0..t * d)
                            .map(|_| match rng.random_range(0..4) {
                                0 => 6.0,
                                1 => -7.0,
                                _ => rng.random_range(-3.0..3.0),
                            })
                            .collect();
                        Tensor::matrix(t, d, v).unwrap()
                    })
                    .collect(),
                token_ids: vec![0; t],
                token_strings: vec![String::new(); t],
            })
            .collect();
        let th = OutlierThresholds { magnitude: 6.0, layer_frac: 0.25, token_frac: 0.2, seq_frac: 0.5 };
        prop_assert_eq!(detect_outlier_features(&traces, &th).unwrap(), outlier_oracle(&traces, &th));
    }
}

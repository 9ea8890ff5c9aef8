use std::collections::{BTreeMap, BTreeSet};

use dopra_core::metrics::{chair_scores, CaptionRecord, ImageId};
use dopra_core::model::{
    log_softmax, softmax, StepModel, TokenSequence, ToyModelConfig, ToyTransformer, TraceFile,
    TraceReplay,
};
use dopra_core::penalty::{column_scores, pattern_descriptor, scale_and_mask, AttentionWindow};
use dopra_core::response::{mixed_response, top_k};
use dopra_core::scenario::{generate, Background, Plant, Scenario};
use dopra_core::search::{apply_penalty, decode, overlap_count, top_tokens, DecodeConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn small_toy(seed: u64) -> ToyTransformer {
    ToyTransformer::new(ToyModelConfig {
        n_layers: 2,
        n_heads: 2,
        model_dim: 8,
        vocab_size: 20,
        seed,
        ..ToyModelConfig::default()
    })
    .unwrap()
}

fn window_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..7).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn toy_attention_is_causal(seed in 0u64..1000, tokens in prop::collection::vec(0u32..20, 2..12)) {
        let long = small_toy(seed);
        let short = small_toy(seed);
        let full = long.forward_step(&TokenSequence::from_prompt(&tokens).unwrap()).unwrap();
        let cut = tokens.len() - 1;
        let prefix = short.forward_step(&TokenSequence::from_prompt(&tokens[..cut]).unwrap()).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                for q in 0..cut {
                    prop_assert_eq!(full.attention.row(layer, head, q), prefix.attention.row(layer, head, q));
                }
                for q in 0..tokens.len() {
                    let row = full.attention.row(layer, head, q).unwrap();
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert_eq!(full.attention.weight(layer, head, q, q + 1).unwrap_or(0.0), 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&v).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }

    #[test]
    fn phi_monotone_in_each_entry(raw in window_strategy(), pick in any::<prop::sample::Index>(), bump in 0.01f64..2.0) {
        let k = raw.len();
        let lower: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
        let (i, j) = lower[pick.index(lower.len())];
        let before = column_scores(&scale_and_mask(&AttentionWindow::new(0, 0, raw.clone()), 50.0));
        let mut raised = raw.clone();
        raised[i][j] += bump;
        let after = column_scores(&scale_and_mask(&AttentionWindow::new(0, 0, raised), 50.0));
        let phi = |s: &[f64]| pattern_descriptor(s, 0).unwrap().phi;
        prop_assert!(phi(&after) >= phi(&before));
        prop_assert!(after[j] > before[j]);
    }

    #[test]
    fn masking_is_idempotent(raw in window_strategy()) {
        let w = AttentionWindow::new(0, 0, raw);
        let once = scale_and_mask(&w, 1.0);
        prop_assert_eq!(scale_and_mask(&once, 1.0), once);
    }

    #[test]
    fn overlap_matches_histogram(coords in prop::collection::vec(0usize..8, 1..30)) {
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &coords {
            *hist.entry(*c).or_default() += 1;
        }
        let top = *hist.values().max().unwrap();
        let s = *hist.iter().filter(|(_, n)| **n == top).map(|(p, _)| p).max().unwrap();
        prop_assert_eq!(overlap_count(&coords), Some((s, top)));
    }

    #[test]
    fn top_tokens_match_sort_and_survive_penalty(
        logits in prop::collection::vec(-5i32..5, 5..40),
        n in 1usize..5,
        phi in 0.0f64..100.0,
    ) {
        let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
        let mut order: Vec<(i64, usize)> = logits.iter().enumerate().map(|(i, &l)| (-(l as i64), i)).collect();
        order.sort();
        let expected: Vec<u32> = order.iter().take(n).map(|p| p.1 as u32).collect();
        prop_assert_eq!(top_tokens(&logits, n), expected.clone());
        let penalized = apply_penalty(&logits, phi, 1.0).unwrap();
        prop_assert_eq!(top_tokens(&penalized, n), expected);
    }

    #[test]
    fn chair_permutation_range_and_monotonicity(
        recs in prop::collection::vec((prop::collection::btree_set(0u8..8, 0..5), prop::collection::btree_set(0u8..8, 0..5)), 1..8),
        extra in 100u8..120,
        target in any::<prop::sample::Index>(),
    ) {
        let make = |m: &BTreeSet<u8>, t: &BTreeSet<u8>| CaptionRecord {
            image_id: ImageId::Number(0),
            caption: String::new(),
            mentioned_objects: m.iter().map(|v| v.to_string()).collect(),
            ground_truth_objects: t.iter().map(|v| v.to_string()).collect(),
        };
        let records: Vec<CaptionRecord> = recs.iter().map(|(m, t)| make(m, t)).collect();
        let base = chair_scores(&records).unwrap();
        prop_assert!((0.0..=1.0).contains(&base.c_s) && (0.0..=1.0).contains(&base.c_i));

        let mut reversed = records.clone();
        reversed.reverse();
        prop_assert_eq!(chair_scores(&reversed).unwrap(), base);

        let mut more = records.clone();
        let i = target.index(more.len());
        more[i].mentioned_objects.insert(extra.to_string());
        let after = chair_scores(&more).unwrap();
        prop_assert!(after.c_s >= base.c_s && after.c_i >= base.c_i);
    }

    #[test]
    fn response_is_bilinear(m in 1usize..5, n in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, k: usize| Array2::from_shape_fn((r, k), |_| rng.random_range(-3.0..3.0));
        let q1 = draw(m, c);
        let q2 = draw(m, c);
        let x = draw(n, c);
        let sum = mixed_response(&(&q1 + &q2), &x).unwrap();
        let parts = mixed_response(&q1, &x).unwrap() + mixed_response(&q2, &x).unwrap();
        for (a, b) in sum.iter().zip(parts.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn ranking_is_shift_invariant(scores in prop::collection::vec(-1000i32..1000, 1..80), shift in -1000i32..1000, k in 1usize..60) {
        let base: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
        let moved: Vec<f64> = scores.iter().map(|&s| f64::from(s + shift)).collect();
        prop_assert_eq!(top_k(&base, k), top_k(&moved, k));
    }

    #[test]
    fn scenario_rows_are_distributions(seed in any::<u64>(), strength in 0.0f64..=1.0, uniform in any::<bool>(), at in 0usize..12) {
        let scenario = Scenario {
            length: 12,
            n_image: 3,
            n_prompt: 2,
            n_layers: 2,
            n_heads: 3,
            layer: 1,
            seed,
            background: if uniform { Background::Uniform } else { Background::Dirichlet },
            plant: Some(Plant { position: 5 + at, start_step: 0, strength }),
            ..Scenario::default()
        };
        let trace = generate(&scenario).unwrap();
        for step in &trace.steps {
            for row in &step.rows {
                for head in &row.weights[0] {
                    prop_assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(head.iter().all(|v| *v >= 0.0));
                }
            }
        }
        let bytes = trace.to_bytes();
        prop_assert_eq!(TraceFile::from_bytes(&bytes).unwrap(), trace);
    }

    #[test]
    fn decode_terminates_with_sound_ledger(
        seed in 0u64..500,
        max_new in 1usize..16,
        k in 1usize..5,
        r in 1usize..4,
        beta in 0usize..4,
        n_beam in 1usize..4,
        strength in 0.0f64..=1.0,
    ) {
        let scenario = Scenario {
            length: 16,
            seed,
            plant: Some(Plant { position: 24 + 1, start_step: 0, strength }),
            ..Scenario::default()
        };
        let replay = TraceReplay::new(generate(&scenario).unwrap());
        let prompt = replay.prompt().unwrap();
        let cfg = DecodeConfig { k, r, l: r + 1, beta, n_beam, max_new_tokens: max_new, ..DecodeConfig::default() };
        let result = decode(&replay, &prompt, &cfg).unwrap();
        prop_assert!(result.steps <= max_new * (beta + 1) + max_new);
        prop_assert_eq!(result.tokens.len(), max_new);
        let mut floor = 0;
        for e in &result.log {
            prop_assert!(e.s_floor >= floor);
            floor = e.s_floor;
            prop_assert_eq!(e.candidates, cfg.n_can * e.active_beams);
        }
        for ev in &result.rollbacks {
            prop_assert!(ev.count <= beta);
            prop_assert!(!result.log.iter().any(|e| e.step > ev.step && e.position == ev.s + 1 && e.chosen_token == ev.banned_token));
        }
    }
}

mod common;

use common::*;
use occvlm::lm::{beam_search, greedy_decode, sample_decode, DecodeConfig, DecodeStrategy, NextTokenModel};
use occvlm::text::EOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn width_four_matches_exhaustive_on_fixed_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let m = FixedLogits((0..3).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect());
        let (ids, score) = exhaustive_best(&m, 3);
        let b = beam_search(&m, 4, 3, false).unwrap();
        assert_eq!(b.tokens.ids(), &ids[..], "logits {:?}", m.0);
        assert!((b.cum_logprob - score).abs() < 1e-12);
    }
}

#[test]
fn wider_beams_never_score_worse_on_fixed_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let m = FixedLogits((0..3).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect());
        let scores: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&w| beam_search(&m, w, 3, false).unwrap().cum_logprob)
            .collect();
        assert!(scores.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{scores:?}");
    }
}

#[test]
fn full_width_beam_is_exhaustive_for_context_dependent_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for salt in 0..300 {
        let m = HashedLogits {
            vocab: 3,
            prefix: (0..rng.random_range(0..4)).map(|_| rng.random_range(0..3)).collect(),
            salt,
        };
        let (ids, score) = exhaustive_best(&m, 3);
        let b = beam_search(&m, 27, 3, false).unwrap();
        assert_eq!(b.tokens.ids(), &ids[..]);
        assert!((b.cum_logprob - score).abs() < 1e-12);
    }
}

#[test]
fn width_one_is_greedy_on_random_prefixes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for salt in 0..1000 {
        let vocab = rng.random_range(3..8);
        let m = HashedLogits {
            vocab,
            prefix: (0..rng.random_range(0..6)).map(|_| rng.random_range(0..vocab as u32)).collect(),
            salt,
        };
        let max_new = rng.random_range(1..7);
        let g = greedy_decode(&m, max_new).unwrap();
        let b = beam_search(&m, 1, max_new, false).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert_eq!(g.cum_logprob.to_bits(), b.cum_logprob.to_bits());
    }
}

#[test]
fn every_decoder_stops_within_max_new() {
    let m = FixedLogits(vec![3.0, 2.0, -5.0]);
    for max_new in 0..5 {
        assert!(greedy_decode(&m, max_new).unwrap().tokens.len() <= max_new);
        assert!(beam_search(&m, 3, max_new, false).unwrap().tokens.len() <= max_new);
        assert!(beam_search(&m, 3, max_new, true).unwrap().tokens.len() <= max_new);
        assert!(sample_decode(&m, max_new, 1.0, 3).unwrap().tokens.len() <= max_new);
    }
}

#[test]
fn sampling_frequencies_match_distribution() {
    let p = [0.5, 0.3, 0.2];
    let m = FixedLogits(p.iter().map(|x: &f64| x.ln()).collect());
    let mut counts = [0usize; 3];
    let n = 10_000;
    for seed in 0..n {
        let s = sample_decode(&m, 1, 1.0, seed).unwrap();
        counts[s.tokens.ids()[0] as usize] += 1;
    }
    for (c, q) in counts.iter().zip(p) {
        assert!((*c as f64 / n as f64 - q).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn sampling_is_reproducible_and_reports_its_log_probability() {
    let m = HashedLogits {
        vocab: 6,
        prefix: vec![4, 5],
        salt: 9,
    };
    let a = sample_decode(&m, 6, 0.7, 42).unwrap();
    assert_eq!(a, sample_decode(&m, 6, 0.7, 42).unwrap());
    let mut total = 0.0;
    for i in 0..a.tokens.len() {
        let lp = m.next_log_probs(&a.tokens.ids()[..i]).unwrap();
        let q = occvlm::numerics::log_softmax(&lp.iter().map(|l| l / 0.7).collect::<Vec<_>>());
        total += q[a.tokens.ids()[i] as usize];
    }
    assert!((a.cum_logprob - total).abs() < 1e-12);
    let at_one = sample_decode(&m, 6, 1.0, 42).unwrap();
    let direct: f64 = (0..at_one.tokens.len())
        .map(|i| m.next_log_probs(&at_one.tokens.ids()[..i]).unwrap()[at_one.tokens.ids()[i] as usize])
        .sum();
    assert!((at_one.cum_logprob - direct).abs() < 1e-12);
}

#[test]
fn near_zero_temperature_is_greedy() {
    let m = HashedLogits {
        vocab: 5,
        prefix: vec![3],
        salt: 1,
    };
    assert_eq!(sample_decode(&m, 5, 1e-9, 7).unwrap(), greedy_decode(&m, 5).unwrap());
}

#[test]
fn eos_peak_yields_empty_content() {
    let m = FixedLogits(vec![0.0, 0.0, 4.0]);
    for cfg in [DecodeStrategy::Greedy, DecodeStrategy::Beam] {
        let h = DecodeConfig {
            strategy: cfg,
            ..DecodeConfig::default()
        }
        .decode(&m)
        .unwrap();
        assert!(h.content().is_empty());
        assert_eq!(h.tokens.ids(), &[EOS]);
    }
}

#[test]
fn beam_rescoring_on_real_model_matches() {
    let vlm = toy_vlm(3);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let x = random_embedding(&mut rng, 8);
        let ins = random_tokens(&mut rng, 3);
        let p = vlm.prompt(&x, &ins).unwrap();
        for w in [1, 2, 4] {
            let h = beam_search(&p, w, 5, false).unwrap();
            assert!((p.score(h.tokens.ids()).unwrap() - h.cum_logprob).abs() < 1e-9);
        }
    }
}

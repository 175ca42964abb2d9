//! Decoder search checked against exhaustive enumeration and a monotone
//! dynamic program that score derivations from scratch.

mod support;

use monoses::decoder::{Decoder, DecoderConfig, LogLinearWeights};
use monoses::ngram_lm::{LanguageModel, LmConfig};
use monoses::phrase_table::{PhraseScores, PhraseTable, PhraseTableEntry};
use monoses::Phrase;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use support::decoder::*;

#[test]
fn best_score_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for round in 0..150 {
        let inst = random_instance(&mut rng, round % 2 == 1);
        let cfg = config(2);
        let d = Decoder::new(&inst.table, inst.reordering.as_ref(), &inst.lm, &inst.weights, &cfg);
        let best = d.translate(&inst.sentence);
        let oracle = brute_force(&inst, 2);
        assert!(
            (best.score - oracle[0].0).abs() < 1e-9,
            "round {round}: decoder {} vs oracle {}",
            best.score,
            oracle[0].0
        );
        let recomputed = features(
            &inst,
            &best
                .derivation
                .iter()
                .map(|s| Step {
                    start: s.span.0,
                    end: s.span.1,
                    source: s.source.clone(),
                    target: s.target.clone(),
                    scores: if s.copied {
                        [1.0; 6]
                    } else {
                        inst.table.get(&s.source, &s.target).unwrap().scores.to_array()
                    },
                    copied: s.copied,
                })
                .collect::<Vec<_>>(),
        );
        for (a, b) in recomputed.iter().zip(&best.features) {
            assert!((a - b).abs() < 1e-9, "round {round}: features {recomputed:?} vs {:?}", best.features);
        }
    }
}

#[test]
fn nbest_lists_are_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for round in 0..60 {
        let inst = random_instance(&mut rng, round % 2 == 0);
        let cfg = config(2);
        let d = Decoder::new(&inst.table, inst.reordering.as_ref(), &inst.lm, &inst.weights, &cfg);
        let list = d.nbest(&inst.sentence, 20);
        let again = d.nbest(&inst.sentence, 20);
        assert_eq!(list, again, "determinism");
        assert_eq!(list[0], d.translate(&inst.sentence));
        let single = d.nbest(&inst.sentence, 1);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], list[0]);
        let oracle = brute_force(&inst, 2);
        let mut best_by_surface: FxHashMap<String, f64> = FxHashMap::default();
        for (s, surf) in &oracle {
            let e = best_by_surface.entry(surf.clone()).or_insert(f64::NEG_INFINITY);
            *e = e.max(*s);
        }
        let mut surfaces = std::collections::HashSet::new();
        for (i, h) in list.iter().enumerate() {
            assert!(surfaces.insert(h.surface()), "duplicate surface");
            let dot: f64 = h.features.iter().zip(&inst.weights.0).map(|(a, b)| a * b).sum();
            assert!((dot - h.score).abs() < 1e-9);
            if i > 0 {
                assert!(list[i - 1].score >= h.score);
            }
            // every emitted hypothesis is a real derivation, never better
            // than the best derivation of its surface
            assert!(h.score <= best_by_surface[&h.surface()] + 1e-9);
        }
    }
}

#[test]
fn four_derivations_are_enumerated_in_order() {
    let entry = |s: &str, t: &str, p: f64| PhraseTableEntry {
        source: Phrase::parse(s),
        target: Phrase::parse(t),
        scores: PhraseScores::from_array([p; 6]),
    };
    let table = PhraseTable::new(vec![entry("a", "x", 0.6), entry("a", "y", 0.3), entry("b", "z", 0.7), entry("b", "w", 0.2)]);
    let lm = LanguageModel::train(
        &[vec!["x".to_string(), "z".to_string()], vec!["y".to_string(), "w".to_string()]],
        &LmConfig {
            order: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let inst = Instance {
        sentence: vec!["a".into(), "b".into()],
        table,
        reordering: None,
        lm,
        weights: LogLinearWeights::defaults(),
    };
    let cfg = config(0);
    let d = Decoder::new(&inst.table, None, &inst.lm, &inst.weights, &cfg);
    let list = d.nbest(&inst.sentence, 10);
    let oracle = brute_force(&inst, 0);
    assert_eq!(oracle.len(), 4);
    assert_eq!(list.len(), 4);
    for (h, (score, surface)) in list.iter().zip(&oracle) {
        assert_eq!(&h.surface(), surface);
        assert!((h.score - score).abs() < 1e-9);
    }
}

/// Monotone decoding as a dynamic program over (position, LM context).
fn monotone_dp(inst: &Instance) -> f64 {
    let n = inst.sentence.len();
    let keep = inst.lm.order() - 1;
    let w = &inst.weights.0;
    let mut states: Vec<FxHashMap<Vec<u32>, f64>> = vec![FxHashMap::default(); n + 1];
    states[0].insert(vec![inst.lm.bos()], 0.0);
    for i in 0..n {
        let current: Vec<(Vec<u32>, f64)> = states[i].iter().map(|(k, v)| (k.clone(), *v)).collect();
        for (ctx, score) in current {
            for j in i + 1..=n.min(i + 5) {
                for (_, target, scores, copied) in span_options(inst, i, j) {
                    let mut s = score;
                    for k in 0..6 {
                        s += w[k] * scores[k].ln();
                    }
                    let mut c = ctx.clone();
                    for t in target.tokens() {
                        let id = inst.lm.id(t);
                        s += w[6] * inst.lm.ln_prob(&c, id);
                        c.push(id);
                        if c.len() > keep {
                            c.remove(0);
                        }
                    }
                    s += w[7] * -(target.order() as f64) + w[8];
                    if copied {
                        s += w[16];
                    }
                    let e = states[j].entry(c).or_insert(f64::NEG_INFINITY);
                    *e = e.max(s);
                }
            }
        }
    }
    states[n]
        .iter()
        .map(|(ctx, s)| s + w[6] * inst.lm.ln_prob(ctx, inst.lm.eos()))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn zero_distortion_matches_monotone_dp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..100 {
        let inst = random_instance(&mut rng, false);
        let cfg = config(0);
        let d = Decoder::new(&inst.table, None, &inst.lm, &inst.weights, &cfg);
        let best = d.translate(&inst.sentence);
        let dp = monotone_dp(&inst);
        assert!((best.score - dp).abs() < 1e-9, "round {round}: {} vs {dp}", best.score);
        let mut expected_start = 0;
        for step in &best.derivation {
            assert_eq!(step.span.0, expected_start);
            expected_start = step.span.1;
        }
    }
}

#[test]
fn spans_are_disjoint_and_cover_the_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..50 {
        let inst = random_instance(&mut rng, true);
        let cfg = DecoderConfig {
            beam_size: 5,
            ..config(3)
        };
        let d = Decoder::new(&inst.table, inst.reordering.as_ref(), &inst.lm, &inst.weights, &cfg);
        for h in d.nbest(&inst.sentence, 5) {
            let mut covered = vec![0; inst.sentence.len()];
            for s in &h.derivation {
                for c in &mut covered[s.span.0..s.span.1] {
                    *c += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1));
        }
    }
}

//! MERT line search checked against dense grid search, plus pool-level
//! properties of the optimizer.

mod support;

use monoses::bleu::{bleu_stats, Smoothing};
use monoses::decoder::NUM_FEATURES;
use monoses::tuning::{
    optimize_on_pools, Hinge, LossConstants, NBestPool, PoolHypothesis, PoolRole, PoolSentence, TuneConfig,
    TuningPools, TuningStats,
};
use monoses::decoder::LogLinearWeights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{line_search_matches_grid, random_pools};

#[test]
fn envelope_equals_grid_on_random_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let (pools, w, d) = random_pools(&mut rng);
        if let Err(e) = line_search_matches_grid(&pools, &w, &d) {
            panic!("case {case}: {e}");
        }
    }
}

fn hyp(tokens: &str, reference: &str, features: [f64; 2], role: PoolRole) -> PoolHypothesis {
    let tokens: Vec<String> = tokens.split(' ').map(str::to_string).collect();
    let reference: Vec<&str> = reference.split(' ').collect();
    let mut f = [0.0; NUM_FEATURES];
    f[0] = features[0];
    f[1] = features[1];
    PoolHypothesis {
        stats: TuningStats {
            bleu: bleu_stats(&tokens, &reference),
            back_translation: (role == PoolRole::Source).then(|| tokens.clone()),
            lm_log2: -(tokens.len() as f64),
            lm_tokens: tokens.len() as u64 + 1,
            hyp_len: tokens.len(),
        },
        tokens,
        features: f,
    }
}

/// One source sentence with a good and a bad hypothesis; feature 1 is high
/// only on the good one, feature 0 favours the bad one.
fn separable_pools() -> TuningPools {
    let reference = "the cat sat on the mat";
    let mut s = PoolSentence::new(vec![], reference.split(' ').map(str::to_string).collect());
    s.push(hyp("dog dog dog", reference, [1.0, 0.0], PoolRole::Source));
    s.push(hyp(reference, reference, [0.0, 1.0], PoolRole::Source));
    let mut b = PoolSentence::new(vec![], reference.split(' ').map(str::to_string).collect());
    b.push(hyp(reference, reference, [0.0, 0.0], PoolRole::RoundTrip));
    TuningPools {
        source: NBestPool {
            role: PoolRole::Source,
            sentences: vec![s],
        },
        round_trip: NBestPool {
            role: PoolRole::RoundTrip,
            sentences: vec![b],
        },
        constants: LossConstants {
            h_natural_tgt: 2.0,
            h_natural_src: 2.0,
            h_fixed_translations: 2.0,
            smoothing: Smoothing::PlusOneHigherOrders,
            hinge: Hinge::TranslatedAboveNatural,
        },
    }
}

#[test]
fn crossing_lines_break_at_the_analytic_point() {
    let pools = separable_pools();
    let mut w = [0.0; NUM_FEATURES];
    w[0] = 1.0;
    let mut d = [0.0; NUM_FEATURES];
    d[1] = 1.0;
    // lines: bad = 1 + 0γ, good = 0 + γ; they cross at w·Δf / −d·Δf = 1
    let (gamma, loss) = pools.line_search(&w, &d);
    assert_eq!(gamma, 2.0);
    assert!(loss < pools.loss_at(&w));
    assert_eq!(pools.loss_at(&support::moved(&w, &d, 0.999)), pools.loss_at(&w));
    assert_eq!(pools.loss_at(&support::moved(&w, &d, 1.001)), loss);
}

#[test]
fn single_hypothesis_is_flat() {
    let mut pools = separable_pools();
    pools.source.sentences[0].hyps.truncate(1);
    let mut d = [0.0; NUM_FEATURES];
    d[0] = 1.0;
    d[1] = -2.0;
    assert_eq!(pools.line_search(&[0.0; NUM_FEATURES], &d).0, 0.0);
}

#[test]
fn separating_feature_moves_the_right_way() {
    let pools = separable_pools();
    let mut weights = LogLinearWeights::defaults();
    weights.0[0] = 1.0;
    weights.0[1] = 0.0;
    let config = TuneConfig {
        random_directions: 0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, _, after) = optimize_on_pools(&pools, &weights, &[0, 1], &config, &mut rng).expect("a step");
    assert!(after < pools.loss_at(&weights.0));
    assert!(w.0[1] - w.0[0] > weights.0[1] - weights.0[0]);
}

#[test]
fn infinite_threshold_keeps_the_weights() {
    let pools = separable_pools();
    let mut weights = LogLinearWeights::defaults();
    weights.0[0] = 1.0;
    weights.0[1] = 0.0;
    let config = TuneConfig {
        min_relative_gain: f64::INFINITY,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(optimize_on_pools(&pools, &weights, &[0, 1], &config, &mut rng).is_none());
}

#[test]
fn accepted_steps_strictly_lower_the_pool_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = TuneConfig::default();
    for _ in 0..30 {
        let (pools, w, _) = random_pools(&mut rng);
        let mut weights = LogLinearWeights(w);
        for _ in 0..5 {
            let before = pools.loss_at(&weights.0);
            match optimize_on_pools(&pools, &weights, &[0, 1, 2, 3], &config, &mut rng) {
                Some((next, _, after)) => {
                    assert!(after < before);
                    assert_eq!(pools.loss_at(&next.0), after);
                    weights = next;
                }
                None => break,
            }
        }
    }
}

//! Random instance generators shared by the oracle and acceptance tests.
#![allow(dead_code)]

pub mod decoder;

use monoses::bleu::{bleu_stats, Smoothing};
use monoses::decoder::{Features, NUM_FEATURES};
use monoses::tuning::{
    Hinge, LossConstants, NBestPool, PoolHypothesis, PoolRole, PoolSentence, TuningPools, TuningStats,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_sentence(rng: &mut ChaCha8Rng, vocab: &[&str], max_len: usize) -> Vec<String> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect()
}

/// Small pools whose features and weights are integers in {−1, 0, 1} on the
/// first four coordinates, so every breakpoint is a rational with
/// denominator at most 8 inside [−8, 8].
pub fn random_pools(rng: &mut ChaCha8Rng) -> (TuningPools, Features, Features) {
    let vocab = ["a", "b", "c", "d"];
    let mut weights = [0.0; NUM_FEATURES];
    let mut direction = [0.0; NUM_FEATURES];
    for i in 0..4 {
        weights[i] = rng.gen_range(-1..=1) as f64;
        direction[i] = rng.gen_range(-1..=1) as f64;
    }
    if direction.iter().all(|&d| d == 0.0) {
        direction[rng.gen_range(0..4)] = 1.0;
    }
    let make_pool = |role: PoolRole, rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..=5);
        let sentences = (0..n)
            .map(|_| {
                let reference = random_sentence(rng, &vocab, 5);
                let mut sent = PoolSentence::new(reference.clone(), reference.clone());
                for _ in 0..rng.gen_range(1..=6) {
                    let tokens = random_sentence(rng, &vocab, 6);
                    let mut features = [0.0; NUM_FEATURES];
                    for f in features.iter_mut().take(4) {
                        *f = rng.gen_range(-1..=1) as f64;
                    }
                    // distinct vectors on one line tie only up to rounding
                    let line = |f: &Features| (dot(&weights, f), dot(&direction, f));
                    if sent.hyps.iter().any(|h| h.features != features && line(&h.features) == line(&features)) {
                        continue;
                    }
                    let back = random_sentence(rng, &vocab, 6);
                    let scored = if role == PoolRole::Source { &back } else { &tokens };
                    let stats = TuningStats {
                        bleu: bleu_stats(scored, &reference),
                        back_translation: (role == PoolRole::Source).then(|| back.clone()),
                        lm_log2: -rng.gen_range(1.0..20.0),
                        lm_tokens: tokens.len() as u64 + 1,
                        hyp_len: tokens.len(),
                    };
                    sent.push(PoolHypothesis {
                        tokens,
                        features,
                        stats,
                    });
                }
                sent
            })
            .collect();
        NBestPool { role, sentences }
    };
    let source = make_pool(PoolRole::Source, rng);
    let round_trip = make_pool(PoolRole::RoundTrip, rng);
    let constants = LossConstants {
        h_natural_tgt: rng.gen_range(0.5..3.0),
        h_natural_src: rng.gen_range(0.5..3.0),
        h_fixed_translations: rng.gen_range(0.5..3.0),
        smoothing: Smoothing::PlusOneHigherOrders,
        hinge: Hinge::TranslatedAboveNatural,
    };
    (
        TuningPools {
            source,
            round_trip,
            constants,
        },
        weights,
        direction,
    )
}

fn dot(a: &Features, b: &Features) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn moved(w: &Features, d: &Features, gamma: f64) -> Features {
    let mut out = *w;
    for (o, x) in out.iter_mut().zip(d) {
        *o += gamma * x;
    }
    out
}

/// True when some sentence has two hypotheses with different slopes tied
/// for the best score at `gamma`, i.e. `gamma` is a breakpoint and the
/// argmax there mixes neighbouring intervals.
pub fn on_breakpoint(pools: &TuningPools, w: &Features, d: &Features, gamma: f64) -> bool {
    let x = moved(w, d, gamma);
    pools.source.sentences.iter().chain(&pools.round_trip.sentences).any(|s| {
        let scored: Vec<(f64, f64)> = s
            .hyps
            .iter()
            .map(|h| {
                let v: f64 = x.iter().zip(&h.features).map(|(a, b)| a * b).sum();
                let m: f64 = d.iter().zip(&h.features).map(|(a, b)| a * b).sum();
                (v, m)
            })
            .collect();
        let top = scored.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let mut slopes = scored.iter().filter(|p| p.0 == top).map(|p| p.1);
        let first = slopes.next();
        slopes.any(|m| Some(m) != first)
    })
}

/// Minimum loss over the 20,001-point grid on [−10, 10], skipping grid
/// points that fall exactly on a breakpoint.
pub fn grid_minimum(pools: &TuningPools, w: &Features, d: &Features) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    for i in 0..=20_000 {
        let gamma = -10.0 + i as f64 * 0.001;
        if on_breakpoint(pools, w, d, gamma) {
            continue;
        }
        let loss = pools.loss_at(&moved(w, d, gamma));
        if loss < best.1 {
            best = (gamma, loss);
        }
    }
    best
}

/// Checks the envelope search against the grid on one instance. Returns a
/// description of the mismatch, if any.
pub fn line_search_matches_grid(pools: &TuningPools, w: &Features, d: &Features) -> Result<(), String> {
    let (gamma, loss) = pools.line_search(w, d);
    let at_gamma = pools.loss_at(&moved(w, d, gamma));
    if at_gamma != loss {
        return Err(format!("reported loss {loss} but loss at γ={gamma} is {at_gamma}"));
    }
    // γ = 0 may itself be a breakpoint; the search keeps it unless some
    // interval is strictly better
    let (grid_gamma, grid_loss) = grid_minimum(pools, w, d);
    let loss0 = pools.loss_at(w);
    let expected = if grid_loss < loss0 { grid_loss } else { loss0 };
    if (expected - loss).abs() > 1e-12 {
        return Err(format!("envelope γ={gamma} loss {loss}, grid γ={grid_gamma} loss {grid_loss}"));
    }
    // same selection means the same interval
    let sel = |g: f64| -> Vec<usize> {
        let x = moved(w, d, g);
        pools
            .source
            .sentences
            .iter()
            .chain(&pools.round_trip.sentences)
            .map(|s| {
                let mut best = (0, f64::NEG_INFINITY);
                for (i, h) in s.hyps.iter().enumerate() {
                    let v: f64 = x.iter().zip(&h.features).map(|(a, b)| a * b).sum();
                    if v > best.1 {
                        best = (i, v);
                    }
                }
                best.0
            })
            .collect()
    };
    if gamma != 0.0 {
        if !(loss < loss0) {
            return Err(format!("step to γ={gamma} does not lower the loss {loss0}"));
        }
        let here = sel(gamma);
        let grid_sel: Vec<Vec<usize>> = (0..=20_000)
            .map(|i| -10.0 + i as f64 * 0.001)
            .filter(|g| !on_breakpoint(pools, w, d, *g) && pools.loss_at(&moved(w, d, *g)) == grid_loss)
            .map(sel)
            .collect();
        if !grid_sel.contains(&here) {
            return Err(format!("interval at γ={gamma} not found on the grid"));
        }
    }
    Ok(())
}

/// Random sentence pair lengths in 1..=8 with a random sparse alignment.
pub fn random_aligned_pair(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>, monoses::refine::Alignment) {
    let ns = rng.gen_range(1..=8);
    let nt = rng.gen_range(1..=8);
    let src = (0..ns).map(|i| format!("s{i}")).collect();
    let tgt = (0..nt).map(|i| format!("t{i}")).collect();
    let density = rng.gen_range(0.05..0.4);
    let mut links = Vec::new();
    for s in 0..ns {
        for t in 0..nt {
            if rng.gen_bool(density) {
                links.push((s, t));
            }
        }
    }
    (src, tgt, monoses::refine::Alignment::new(links))
}

/// All rectangles with at least one link inside and no link crossing their
/// border, as inclusive spans `(s1, s2, t1, t2)`.
pub fn rectangle_oracle(
    ns: usize,
    nt: usize,
    alignment: &monoses::refine::Alignment,
    max_len: usize,
) -> std::collections::BTreeSet<(usize, usize, usize, usize)> {
    let mut out = std::collections::BTreeSet::new();
    for s1 in 0..ns {
        for s2 in s1..ns {
            for t1 in 0..nt {
                for t2 in t1..nt {
                    if s2 - s1 + 1 > max_len || t2 - t1 + 1 > max_len {
                        continue;
                    }
                    let mut inside = false;
                    let mut crossing = false;
                    for &(s, t) in alignment.links() {
                        let si = (s1..=s2).contains(&s);
                        let ti = (t1..=t2).contains(&t);
                        inside |= si && ti;
                        crossing |= si != ti;
                    }
                    if inside && !crossing {
                        out.insert((s1, s2, t1, t2));
                    }
                }
            }
        }
    }
    out
}

pub fn extraction_matches_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (src, tgt, al) = random_aligned_pair(rng);
    let max_len = rng.gen_range(1..=5);
    let got: std::collections::BTreeSet<_> = monoses::refine::extract_phrase_pairs(&src, &tgt, &al, max_len)
        .iter()
        .map(|p| (p.source_span.0, p.source_span.1, p.target_span.0, p.target_span.1))
        .collect();
    let want = rectangle_oracle(src.len(), tgt.len(), &al, max_len);
    if got == want {
        Ok(())
    } else {
        Err(format!("{:?} (max_len {max_len}): got {got:?}, want {want:?}", al.links()))
    }
}

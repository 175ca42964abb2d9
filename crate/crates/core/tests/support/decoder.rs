//! Random decoding instances and an exhaustive derivation enumerator.

use monoses::decoder::{Decoder, DecoderConfig, LogLinearWeights, NUM_FEATURES};
use monoses::ngram_lm::{LanguageModel, LmConfig};
use monoses::phrase_table::{OrientationProbs, PhraseScores, PhraseTable, PhraseTableEntry, ReorderingModel};
use monoses::Phrase;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

pub const LN10: f64 = std::f64::consts::LN_10;

pub struct Instance {
    pub sentence: Vec<String>,
    pub table: PhraseTable,
    pub reordering: Option<ReorderingModel>,
    pub lm: LanguageModel,
    pub weights: LogLinearWeights,
}

pub fn random_instance(rng: &mut ChaCha8Rng, with_reordering: bool) -> Instance {
    let src_vocab = ["a", "b", "c", "d"];
    let tgt_vocab = ["x", "y", "z", "w", "v"];
    let len = rng.gen_range(1..=6);
    let sentence: Vec<String> = (0..len).map(|_| src_vocab[rng.gen_range(0..4)].to_string()).collect();
    let mut entries = Vec::new();
    let mut probs = FxHashMap::default();
    let mut sources: Vec<Vec<&str>> = src_vocab.iter().map(|s| vec![*s]).collect();
    for _ in 0..4 {
        sources.push(vec![src_vocab[rng.gen_range(0..4)], src_vocab[rng.gen_range(0..4)]]);
    }
    for src in sources {
        // leave one word untranslated now and then to exercise copying
        if src.len() == 1 && rng.gen_bool(0.15) {
            continue;
        }
        for _ in 0..rng.gen_range(1..=3) {
            let tlen = rng.gen_range(1..=2);
            let tgt: Vec<&str> = (0..tlen).map(|_| tgt_vocab[rng.gen_range(0..5)]).collect();
            let scores = PhraseScores::from_array([(); 6].map(|_| rng.gen_range(0.05..1.0)));
            let entry = PhraseTableEntry {
                source: Phrase::from_tokens(&src),
                target: Phrase::from_tokens(&tgt),
                scores,
            };
            if rng.gen_bool(0.8) {
                let mut p: OrientationProbs = [0.0; 6];
                for half in 0..2 {
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    for o in 0..3 {
                        p[3 * half + o] = raw[o] / z;
                    }
                }
                probs.insert((entry.source.clone(), entry.target.clone()), p);
            }
            entries.push(entry);
        }
    }
    let lm_corpus: Vec<Vec<String>> = (0..30)
        .map(|_| {
            (0..rng.gen_range(1..6))
                .map(|_| tgt_vocab[rng.gen_range(0..5)].to_string())
                .collect()
        })
        .collect();
    let lm = LanguageModel::train(
        &lm_corpus,
        &LmConfig {
            order: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let mut weights = LogLinearWeights::defaults();
    for w in weights.0.iter_mut().take(16) {
        *w = rng.gen_range(-1.0..1.0);
    }
    Instance {
        sentence,
        table: PhraseTable::new(entries),
        reordering: with_reordering.then(|| ReorderingModel::new(probs)),
        lm,
        weights,
    }
}

/// Options for a span straight from the table, with the copy rule.
pub fn span_options(inst: &Instance, start: usize, end: usize) -> Vec<(Phrase, Phrase, [f64; 6], bool)> {
    let src = Phrase::from_tokens(&inst.sentence[start..end]);
    let mut out: Vec<_> = inst
        .table
        .options(&src)
        .iter()
        .map(|e| (e.source.clone(), e.target.clone(), e.scores.to_array(), false))
        .collect();
    if end - start == 1 && out.is_empty() {
        out.push((src.clone(), src, [1.0; 6], true));
    }
    out
}

#[derive(Clone)]
pub struct Step {
    pub start: usize,
    pub end: usize,
    pub source: Phrase,
    pub target: Phrase,
    pub scores: [f64; 6],
    pub copied: bool,
}

pub fn orientation(prev: Option<(usize, usize)>, start: usize, end: usize) -> usize {
    // spans as [start, end), virtual previous phrase ends just before 0
    let (ps, pe) = prev.map_or((-1i64, -1i64), |(s, e)| (s as i64, e as i64 - 1));
    if start as i64 == pe + 1 {
        0
    } else if end as i64 - 1 == ps - 1 {
        1
    } else {
        2
    }
}

pub fn features(inst: &Instance, steps: &[Step]) -> [f64; NUM_FEATURES] {
    let mut f = [0.0; NUM_FEATURES];
    let mut tokens: Vec<String> = Vec::new();
    let mut prev_end = 0usize;
    let n = inst.sentence.len();
    let uniform = [1.0 / 3.0; 6];
    for (i, s) in steps.iter().enumerate() {
        for k in 0..6 {
            f[k] += s.scores[k].ln();
        }
        tokens.extend(s.target.tokens().map(String::from));
        f[7] -= s.target.order() as f64;
        f[8] += 1.0;
        f[9] -= (s.start as f64 - prev_end as f64).abs();
        prev_end = s.end;
        if s.copied {
            f[16] += 1.0;
        }
        if let Some(r) = &inst.reordering {
            let probs = |st: &Step| *r.get(&st.source, &st.target).filter(|_| !st.copied).unwrap_or(&uniform);
            let prev = (i > 0).then(|| (steps[i - 1].start, steps[i - 1].end));
            let o = orientation(prev, s.start, s.end);
            f[10 + o] += probs(s)[o].ln();
            if i > 0 {
                f[13 + o] += probs(&steps[i - 1])[3 + o].ln();
            }
            if i + 1 == steps.len() {
                let o = orientation(Some((s.start, s.end)), n, n + 1);
                f[13 + o] += probs(s)[3 + o].ln();
            }
        }
    }
    f[6] = inst.lm.lm_logprob(&tokens) * LN10;
    f
}

pub fn enumerate(inst: &Instance, limit: usize, covered: &mut Vec<bool>, steps: &mut Vec<Step>, out: &mut Vec<(f64, String)>) {
    let n = inst.sentence.len();
    if covered.iter().all(|&c| c) {
        let f = features(inst, steps);
        let score: f64 = f.iter().zip(&inst.weights.0).map(|(a, b)| a * b).sum();
        let surface: Vec<String> = steps.iter().flat_map(|s| s.target.tokens().map(String::from)).collect();
        out.push((score, surface.join(" ")));
        return;
    }
    let prev_end = steps.last().map_or(0, |s| s.end);
    for start in 0..n {
        for end in start + 1..=n.min(start + 5) {
            if covered[start..end].iter().any(|&c| c) {
                break;
            }
            if (start as i64 - prev_end as i64).unsigned_abs() as usize > limit {
                continue;
            }
            for c in &mut covered[start..end] {
                *c = true;
            }
            let gap = covered.iter().position(|&c| !c).unwrap_or(n);
            let ok = gap >= end || end - gap <= limit;
            if ok {
                for (source, target, scores, copied) in span_options(inst, start, end) {
                    steps.push(Step {
                        start,
                        end,
                        source,
                        target,
                        scores,
                        copied,
                    });
                    enumerate(inst, limit, covered, steps, out);
                    steps.pop();
                }
            }
            for c in &mut covered[start..end] {
                *c = false;
            }
        }
    }
}

pub fn brute_force(inst: &Instance, limit: usize) -> Vec<(f64, String)> {
    let mut out = Vec::new();
    enumerate(inst, limit, &mut vec![false; inst.sentence.len()], &mut Vec::new(), &mut out);
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

pub fn config(limit: usize) -> DecoderConfig {
    DecoderConfig {
        beam_size: 1_000_000,
        distortion_limit: limit,
        ..Default::default()
    }
}

/// Decodes one random instance with an unbounded beam and compares the best
/// score with exhaustive enumeration.
pub fn best_matches_exhaustive(rng: &mut ChaCha8Rng, with_reordering: bool) -> Result<(), String> {
    let inst = random_instance(rng, with_reordering);
    let cfg = config(2);
    let d = Decoder::new(&inst.table, inst.reordering.as_ref(), &inst.lm, &inst.weights, &cfg);
    let best = d.translate(&inst.sentence);
    let oracle = brute_force(&inst, 2);
    if (best.score - oracle[0].0).abs() < 1e-9 {
        Ok(())
    } else {
        Err(format!("decoder {} vs exhaustive {} on {:?}", best.score, oracle[0].0, inst.sentence))
    }
}

//! Unsupervised tuning of log-linear weights.
//!
//! The loss needs no parallel data: it combines round-trip BLEU of each
//! monolingual sample through both systems with a language-model entropy
//! term, scaled by a length penalty. One direction is optimized at a time
//! with MERT while the other stays fixed, so back-translations of n-best
//! hypotheses are constants and the corpus loss is piecewise constant along
//! any line in weight space.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::bleu::{bleu_stats, corpus_bleu, BleuStats, Smoothing};
use crate::decoder::{Features, LogLinearWeights, TranslationHypothesis, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::ngram_lm::LanguageModel;
use crate::phrase::Sentence;
use crate::system::System;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Hinge {
    /// Penalize translations whose entropy exceeds that of natural text.
    #[default]
    TranslatedAboveNatural,
    /// The opposite direction, `max(0, H_natural − H_translated)²`.
    NaturalAboveTranslated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub nbest: usize,
    pub random_directions: usize,
    /// A step is taken only if it lowers the pool loss by this fraction.
    pub min_relative_gain: f64,
    /// Decode-and-optimize iterations per half-round.
    pub max_iterations: usize,
    /// Line-search steps on the pools between two decodes.
    pub max_pool_steps: usize,
    /// Number of half-rounds; each optimizes one direction.
    pub rounds: usize,
    /// Stop when a full round improves the loss by less than this fraction.
    pub round_tolerance: f64,
    pub back_translation_beam: usize,
    pub smoothing: Smoothing,
    pub hinge: Hinge,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            nbest: 100,
            random_directions: 8,
            min_relative_gain: 1e-4,
            max_iterations: 20,
            max_pool_steps: 10,
            rounds: 4,
            round_tolerance: 1e-3,
            back_translation_beam: 10,
            smoothing: Smoothing::PlusOneHigherOrders,
            hinge: Hinge::default(),
            seed: 1,
        }
    }
}

pub fn length_penalty(orig_len: usize, roundtrip_len: usize) -> f64 {
    if orig_len == 0 {
        return 1.0;
    }
    (roundtrip_len as f64 / orig_len as f64).max(1.0)
}

pub fn lm_loss(h_translated: f64, h_natural: f64, lp: f64, hinge: Hinge) -> f64 {
    let gap = match hinge {
        Hinge::TranslatedAboveNatural => h_translated - h_natural,
        Hinge::NaturalAboveTranslated => h_natural - h_translated,
    };
    lp * gap.max(0.0).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cycle_e: f64,
    pub l_cycle_f: f64,
    pub l_lm_e: f64,
    pub l_lm_f: f64,
    pub lp_e: f64,
    pub lp_f: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_cycle_e: f64, l_cycle_f: f64, l_lm_e: f64, l_lm_f: f64, lp_e: f64, lp_f: f64) -> Self {
        LossBreakdown {
            l_cycle_e,
            l_cycle_f,
            l_lm_e,
            l_lm_f,
            lp_e,
            lp_f,
            total: l_cycle_e + l_cycle_f + l_lm_e + l_lm_f,
        }
    }

    pub const TSV_HEADER: &'static str = "l_cycle_e\tl_cycle_f\tl_lm_e\tl_lm_f\tlp_e\tlp_f\ttotal";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.l_cycle_e, self.l_cycle_f, self.l_lm_e, self.l_lm_f, self.lp_e, self.lp_f, self.total
        )
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.5} (cycle E {:.5}, cycle F {:.5}, lm E {:.5}, lm F {:.5}, lp E {:.4}, lp F {:.4})",
            self.total, self.l_cycle_e, self.l_cycle_f, self.l_lm_e, self.l_lm_f, self.lp_e, self.lp_f
        )
    }
}

/// Which system is being tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    EF,
    FE,
}

impl Direction {
    pub fn other(self) -> Direction {
        match self {
            Direction::EF => Direction::FE,
            Direction::FE => Direction::EF,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::EF => "E→F",
            Direction::FE => "F→E",
        })
    }
}

/// Loss parts seen from the tuned system `S → T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalLoss {
    pub cycle_src: f64,
    pub cycle_tgt: f64,
    pub lm_src: f64,
    pub lm_tgt: f64,
    pub lp_src: f64,
    pub lp_tgt: f64,
}

impl DirectionalLoss {
    pub fn total(&self) -> f64 {
        self.cycle_src + self.cycle_tgt + self.lm_src + self.lm_tgt
    }

    pub fn labeled(&self, tuned: Direction) -> LossBreakdown {
        match tuned {
            Direction::EF => LossBreakdown::new(
                self.cycle_src,
                self.cycle_tgt,
                self.lm_src,
                self.lm_tgt,
                self.lp_src,
                self.lp_tgt,
            ),
            Direction::FE => LossBreakdown::new(
                self.cycle_tgt,
                self.cycle_src,
                self.lm_tgt,
                self.lm_src,
                self.lp_tgt,
                self.lp_src,
            ),
        }
    }
}

fn bleu_or_zero(stats: &BleuStats, smoothing: Smoothing) -> f64 {
    corpus_bleu(stats, smoothing).unwrap_or(0.0)
}

/// Per-hypothesis constants for the tuning loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningStats {
    /// Cycle BLEU statistics against the round-trip reference.
    pub bleu: BleuStats,
    /// Back-translation by the fixed system (source-side pool only).
    pub back_translation: Option<Sentence>,
    /// log2 probability of the hypothesis under the tuned system's LM.
    pub lm_log2: f64,
    /// Tokens scored by the LM, including the end marker.
    pub lm_tokens: u64,
    pub hyp_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolHypothesis {
    pub tokens: Sentence,
    pub features: Features,
    pub stats: TuningStats,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolSentence {
    pub source: Sentence,
    pub reference: Sentence,
    pub hyps: Vec<PoolHypothesis>,
    surfaces: FxHashSet<String>,
}

impl PoolSentence {
    pub fn new(source: Sentence, reference: Sentence) -> Self {
        PoolSentence {
            source,
            reference,
            ..Default::default()
        }
    }

    /// Adds a hypothesis unless its surface is already present.
    pub fn push(&mut self, hyp: PoolHypothesis) -> bool {
        if self.surfaces.insert(hyp.tokens.join(" ")) {
            self.hyps.push(hyp);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.surfaces.contains(surface)
    }

    /// Index of the highest-scoring hypothesis, ties to the earliest.
    fn best_at(&self, weights: &Features) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, h) in self.hyps.iter().enumerate() {
            let s = dot(weights, &h.features);
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolRole {
    /// Sources are the tuned direction's own sample; references are the
    /// sources themselves, reached through the fixed reverse system.
    Source,
    /// Sources are fixed reverse translations of the other sample; the
    /// references are that sample.
    RoundTrip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestPool {
    pub role: PoolRole,
    pub sentences: Vec<PoolSentence>,
}

impl NBestPool {
    pub fn num_hypotheses(&self) -> usize {
        self.sentences.iter().map(|s| s.hyps.len()).sum()
    }

    /// Orders each list by model score under `weights`.
    pub fn sort_by_score(&mut self, weights: &Features) {
        for s in &mut self.sentences {
            s.hyps
                .sort_by(|a, b| dot(weights, &b.features).total_cmp(&dot(weights, &a.features)));
        }
    }
}

fn dot(a: &Features, b: &Features) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Corpus-level quantities that do not depend on the tuned weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConstants {
    /// Entropy of the natural target sample under the target LM.
    pub h_natural_tgt: f64,
    /// Entropy of the natural source sample under the source LM.
    pub h_natural_src: f64,
    /// Entropy of the fixed reverse translations under the source LM.
    pub h_fixed_translations: f64,
    pub smoothing: Smoothing,
    pub hinge: Hinge,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Totals {
    a_bleu: BleuStats,
    a_lm_log2: f64,
    a_lm_tokens: u64,
    b_bleu: BleuStats,
}

impl Totals {
    fn add(&mut self, role: PoolRole, s: &TuningStats) {
        match role {
            PoolRole::Source => {
                self.a_bleu += s.bleu;
                self.a_lm_log2 += s.lm_log2;
                self.a_lm_tokens += s.lm_tokens;
            }
            PoolRole::RoundTrip => self.b_bleu += s.bleu,
        }
    }

    fn remove(&mut self, role: PoolRole, s: &TuningStats) {
        match role {
            PoolRole::Source => {
                self.a_bleu.sub_assign(&s.bleu);
                self.a_lm_log2 -= s.lm_log2;
                self.a_lm_tokens -= s.lm_tokens;
            }
            PoolRole::RoundTrip => self.b_bleu.sub_assign(&s.bleu),
        }
    }
}

/// Both pools of one tuning direction with the loss constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningPools {
    pub source: NBestPool,
    pub round_trip: NBestPool,
    pub constants: LossConstants,
}

impl TuningPools {
    fn sentences(&self) -> impl Iterator<Item = (PoolRole, &PoolSentence)> {
        self.source
            .sentences
            .iter()
            .map(|s| (PoolRole::Source, s))
            .chain(self.round_trip.sentences.iter().map(|s| (PoolRole::RoundTrip, s)))
    }

    fn loss_of(&self, t: &Totals) -> DirectionalLoss {
        let c = &self.constants;
        let lp_src = length_penalty(t.a_bleu.ref_len as usize, t.a_bleu.hyp_len as usize);
        let lp_tgt = length_penalty(t.b_bleu.ref_len as usize, t.b_bleu.hyp_len as usize);
        let lp = lp_src * lp_tgt;
        let h_translated = if t.a_lm_tokens == 0 {
            0.0
        } else {
            -t.a_lm_log2 / t.a_lm_tokens as f64
        };
        DirectionalLoss {
            cycle_src: 1.0 - bleu_or_zero(&t.a_bleu, c.smoothing),
            cycle_tgt: 1.0 - bleu_or_zero(&t.b_bleu, c.smoothing),
            lm_src: lm_loss(h_translated, c.h_natural_tgt, lp, c.hinge),
            lm_tgt: lm_loss(c.h_fixed_translations, c.h_natural_src, lp, c.hinge),
            lp_src,
            lp_tgt,
        }
    }

    fn totals_for(&self, choice: impl Fn(&PoolSentence) -> usize) -> Totals {
        let mut t = Totals::default();
        for (role, s) in self.sentences() {
            if !s.hyps.is_empty() {
                t.add(role, &s.hyps[choice(s)].stats);
            }
        }
        t
    }

    /// Loss when every sentence takes its best hypothesis under `weights`.
    pub fn breakdown_at(&self, weights: &Features) -> DirectionalLoss {
        self.loss_of(&self.totals_for(|s| s.best_at(weights)))
    }

    pub fn loss_at(&self, weights: &Features) -> f64 {
        self.breakdown_at(weights).total()
    }

    /// Exact line search along `weights + γ · direction`. Returns the
    /// midpoint of the best interval of γ and its loss, or `(0, loss(0))`
    /// when no interval beats γ = 0.
    pub fn line_search(&self, weights: &Features, direction: &Features) -> (f64, f64) {
        let loss0 = self.loss_at(weights);
        let sentences: Vec<(PoolRole, &PoolSentence)> = self.sentences().filter(|(_, s)| !s.hyps.is_empty()).collect();
        let mut events: Vec<(f64, usize, usize, usize)> = Vec::new();
        let mut selection: Vec<usize> = Vec::with_capacity(sentences.len());
        for (si, (_, s)) in sentences.iter().enumerate() {
            let lines: Vec<(f64, f64)> = s
                .hyps
                .iter()
                .map(|h| (dot(direction, &h.features), dot(weights, &h.features)))
                .collect();
            let env = upper_envelope(&lines);
            selection.push(env[0].1);
            for pair in env.windows(2) {
                events.push((pair[1].0, si, pair[0].1, pair[1].1));
            }
        }
        if events.is_empty() {
            return (0.0, loss0);
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut totals = Totals::default();
        for (si, (role, s)) in sentences.iter().enumerate() {
            totals.add(*role, &s.hyps[selection[si]].stats);
        }
        // (loss, lower bound, upper bound) of every interval
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |loss: f64, lo: f64, hi: f64| {
            let gamma = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => (lo + hi) / 2.0,
                (false, true) => hi - 1.0,
                (true, false) => lo + 1.0,
                (false, false) => 0.0,
            };
            let better = match best {
                None => true,
                Some((bl, bg)) => loss < bl || (loss == bl && gamma.abs() < bg.abs()),
            };
            if better {
                best = Some((loss, gamma));
            }
        };
        let mut lo = f64::NEG_INFINITY;
        let mut i = 0;
        while i <= events.len() {
            let hi = events.get(i).map_or(f64::INFINITY, |e| e.0);
            if hi > lo || !hi.is_finite() {
                consider(self.loss_of(&totals).total(), lo, hi);
            }
            if i == events.len() {
                break;
            }
            while i < events.len() && events[i].0 == hi {
                let (_, si, old, new) = events[i];
                let (role, s) = sentences[si];
                totals.remove(role, &s.hyps[old].stats);
                totals.add(role, &s.hyps[new].stats);
                i += 1;
            }
            lo = hi;
        }
        let Some((_, gamma)) = best else {
            return (0.0, loss0);
        };
        let mut moved = *weights;
        for (m, d) in moved.iter_mut().zip(direction) {
            *m += gamma * d;
        }
        let exact = self.loss_at(&moved);
        if exact < loss0 {
            (gamma, exact)
        } else {
            (0.0, loss0)
        }
    }
}

/// Upper envelope of lines `y = slope · γ + intercept` as `(γ from which
/// the line is on top, line index)`, left to right.
pub fn upper_envelope(lines: &[(f64, f64)]) -> Vec<(f64, usize)> {
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.sort_by(|&a, &b| {
        lines[a]
            .0
            .total_cmp(&lines[b].0)
            .then(lines[b].1.total_cmp(&lines[a].1))
            .then(a.cmp(&b))
    });
    let mut hull: Vec<(f64, usize)> = Vec::new();
    let mut last_slope = None;
    for idx in order {
        let (m, b) = lines[idx];
        if last_slope == Some(m) {
            continue;
        }
        last_slope = Some(m);
        loop {
            let Some(&(start, top)) = hull.last() else {
                hull.push((f64::NEG_INFINITY, idx));
                break;
            };
            let (mt, bt) = lines[top];
            let x = (bt - b) / (m - mt);
            if x <= start {
                hull.pop();
            } else {
                hull.push((x, idx));
                break;
            }
        }
    }
    hull
}

/// Builds and extends the two pools for one tuned direction.
struct PoolBuilder<'a> {
    tuned: &'a System,
    back: System,
    nbest: usize,
    cache: FxHashMap<String, Sentence>,
    pools: TuningPools,
}

fn lm_log2(lm: &LanguageModel, tokens: &[String]) -> f64 {
    lm.lm_logprob(tokens) * std::f64::consts::LOG2_10
}

impl<'a> PoolBuilder<'a> {
    fn new(
        tuned: &'a System,
        fixed: &'a System,
        sample_src: &[Sentence],
        sample_tgt: &[Sentence],
        config: &TuneConfig,
    ) -> Result<Self> {
        if sample_src.is_empty() || sample_tgt.is_empty() {
            return Err(Error::EmptyInput("tuning samples".into()));
        }
        let fixed_translations = fixed.translate_corpus(sample_tgt);
        let constants = LossConstants {
            h_natural_tgt: tuned.lm.per_word_entropy(sample_tgt)?,
            h_natural_src: fixed.lm.per_word_entropy(sample_src)?,
            h_fixed_translations: fixed.lm.per_word_entropy(&fixed_translations)?,
            smoothing: config.smoothing,
            hinge: config.hinge,
        };
        let source = NBestPool {
            role: PoolRole::Source,
            sentences: sample_src.iter().map(|s| PoolSentence::new(s.clone(), s.clone())).collect(),
        };
        let round_trip = NBestPool {
            role: PoolRole::RoundTrip,
            sentences: fixed_translations
                .into_iter()
                .zip(sample_tgt)
                .map(|(src, reference)| PoolSentence::new(src, reference.clone()))
                .collect(),
        };
        let mut back_config = fixed.config.clone();
        back_config.beam_size = config.back_translation_beam;
        Ok(PoolBuilder {
            tuned,
            back: fixed.with_config(back_config),
            nbest: config.nbest,
            cache: FxHashMap::default(),
            pools: TuningPools {
                source,
                round_trip,
                constants,
            },
        })
    }

    /// Decodes both pools with `weights` and merges new hypotheses.
    fn extend(&mut self, weights: &LogLinearWeights) -> usize {
        let system = self.tuned.with_weights(*weights);
        let decoder = system.decoder();
        let lm = &self.tuned.lm;
        let mut added = 0;

        let sources: Vec<&Sentence> = self.pools.source.sentences.iter().map(|s| &s.source).collect();
        let lists: Vec<Vec<TranslationHypothesis>> = sources.par_iter().map(|s| decoder.nbest(s, self.nbest)).collect();
        let mut missing: Vec<Sentence> = lists
            .iter()
            .flatten()
            .filter(|h| !self.cache.contains_key(&h.surface()))
            .map(|h| h.tokens.clone())
            .collect();
        missing.sort();
        missing.dedup();
        let back = self.back.translate_corpus(&missing);
        for (m, b) in missing.into_iter().zip(back) {
            self.cache.insert(m.join(" "), b);
        }
        for (sent, list) in self.pools.source.sentences.iter_mut().zip(lists) {
            for h in list {
                if sent.contains(&h.surface()) {
                    continue;
                }
                let back = self.cache[&h.surface()].clone();
                let stats = TuningStats {
                    bleu: bleu_stats(&back, &sent.reference),
                    back_translation: Some(back),
                    lm_log2: lm_log2(lm, &h.tokens),
                    lm_tokens: h.tokens.len() as u64 + 1,
                    hyp_len: h.tokens.len(),
                };
                added += usize::from(sent.push(PoolHypothesis {
                    tokens: h.tokens,
                    features: h.features,
                    stats,
                }));
            }
        }

        let sources: Vec<&Sentence> = self.pools.round_trip.sentences.iter().map(|s| &s.source).collect();
        let lists: Vec<Vec<TranslationHypothesis>> = sources.par_iter().map(|s| decoder.nbest(s, self.nbest)).collect();
        for (sent, list) in self.pools.round_trip.sentences.iter_mut().zip(lists) {
            for h in list {
                if sent.contains(&h.surface()) {
                    continue;
                }
                let stats = TuningStats {
                    bleu: bleu_stats(&h.tokens, &sent.reference),
                    back_translation: None,
                    lm_log2: lm_log2(lm, &h.tokens),
                    lm_tokens: h.tokens.len() as u64 + 1,
                    hyp_len: h.tokens.len(),
                };
                added += usize::from(sent.push(PoolHypothesis {
                    tokens: h.tokens,
                    features: h.features,
                    stats,
                }));
            }
        }
        self.pools.source.sort_by_score(&weights.0);
        self.pools.round_trip.sort_by_score(&weights.0);
        added
    }
}

/// Decodes fresh pools for `tuned` with its current weights.
pub fn build_pools(
    tuned: &System,
    fixed: &System,
    sample_src: &[Sentence],
    sample_tgt: &[Sentence],
    config: &TuneConfig,
) -> Result<TuningPools> {
    let mut builder = PoolBuilder::new(tuned, fixed, sample_src, sample_tgt, config)?;
    builder.extend(&tuned.weights);
    Ok(builder.pools)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertStep {
    pub iteration: usize,
    pub gamma: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub struct MertResult {
    pub weights: LogLinearWeights,
    pub steps: Vec<MertStep>,
    pub iterations: usize,
    /// Pool loss of the initial and returned weights on the final pools.
    pub initial_pool_loss: f64,
    pub final_pool_loss: f64,
    pub pools: TuningPools,
}

fn directions(tunable: &[usize], random: usize, rng: &mut ChaCha8Rng) -> Vec<Features> {
    let mut out: Vec<Features> = tunable
        .iter()
        .map(|&i| {
            let mut d = [0.0; NUM_FEATURES];
            d[i] = 1.0;
            d
        })
        .collect();
    for _ in 0..random {
        let mut d = [0.0; NUM_FEATURES];
        for &i in tunable {
            d[i] = rng.sample(StandardNormal);
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            d.iter_mut().for_each(|v| *v /= norm);
            out.push(d);
        }
    }
    out
}

/// Greedy line-search descent over pooled n-best lists, for pools that are
/// already built. Returns the new weights and accepted steps.
pub fn optimize_on_pools(
    pools: &TuningPools,
    weights: &LogLinearWeights,
    tunable: &[usize],
    config: &TuneConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(LogLinearWeights, f64, f64)> {
    let current = pools.loss_at(&weights.0);
    let mut best: Option<(f64, f64, Features)> = None;
    for d in directions(tunable, config.random_directions, rng) {
        let (gamma, loss) = pools.line_search(&weights.0, &d);
        if gamma != 0.0 && best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((gamma, loss, d));
        }
    }
    let (gamma, loss, d) = best?;
    if !(loss < current) || current - loss < config.min_relative_gain * current.abs() {
        return None;
    }
    let mut w = *weights;
    for (x, dx) in w.0.iter_mut().zip(&d) {
        *x += gamma * dx;
    }
    Some((w, gamma, loss))
}

/// MERT for `tuned` with `fixed` as the reverse system.
pub fn mert_optimize_direction(
    tuned: &System,
    fixed: &System,
    sample_src: &[Sentence],
    sample_tgt: &[Sentence],
    config: &TuneConfig,
) -> Result<MertResult> {
    tuned.weights.validate()?;
    let tunable = LogLinearWeights::tunable(tuned.has_reordering());
    let mut builder = PoolBuilder::new(tuned, fixed, sample_src, sample_tgt, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = tuned.weights;
    let mut visited = vec![weights];
    let mut steps = Vec::new();
    let mut iterations = 0;
    for iteration in 0..config.max_iterations {
        iterations = iteration + 1;
        let added = builder.extend(&weights);
        let before = builder.pools.loss_at(&weights.0);
        log::debug!(
            "MERT iteration {iterations}: {added} new hypotheses, pool loss {before:.6}"
        );
        let mut loss = before;
        let mut accepted = 0;
        while accepted < config.max_pool_steps.max(1) {
            let Some((w, gamma, after)) = optimize_on_pools(&builder.pools, &weights, &tunable, config, &mut rng) else {
                break;
            };
            log::debug!("pool step γ {gamma:.4} loss {after:.6} weights {:?}", w.0);
            steps.push(MertStep {
                iteration: iterations,
                gamma,
                loss_before: loss,
                loss_after: after,
            });
            loss = after;
            weights = w;
            visited.push(w);
            accepted += 1;
        }
        if accepted == 0 {
            break;
        }
    }
    let pools = builder.pools;
    let initial_pool_loss = pools.loss_at(&visited[0].0);
    let mut best = (visited[0], initial_pool_loss);
    for w in &visited[1..] {
        let l = pools.loss_at(&w.0);
        if l <= best.1 {
            best = (*w, l);
        }
    }
    Ok(MertResult {
        weights: best.0,
        steps,
        iterations,
        initial_pool_loss,
        final_pool_loss: best.1,
        pools,
    })
}

/// Decodes both samples through both systems and evaluates the full loss.
pub fn unsupervised_loss(
    system_ef: &System,
    system_fe: &System,
    sample_e: &[Sentence],
    sample_f: &[Sentence],
    config: &TuneConfig,
) -> Result<LossBreakdown> {
    if sample_e.is_empty() || sample_f.is_empty() {
        return Err(Error::EmptyInput("tuning samples".into()));
    }
    let t_e = system_ef.translate_corpus(sample_e);
    let rt_e = system_fe.translate_corpus(&t_e);
    let t_f = system_fe.translate_corpus(sample_f);
    let rt_f = system_ef.translate_corpus(&t_f);
    let sum_stats = |hyps: &[Sentence], refs: &[Sentence]| -> BleuStats {
        hyps.iter().zip(refs).map(|(h, r)| bleu_stats(h, r)).sum()
    };
    let stats_e = sum_stats(&rt_e, sample_e);
    let stats_f = sum_stats(&rt_f, sample_f);
    let lp_e = length_penalty(stats_e.ref_len as usize, stats_e.hyp_len as usize);
    let lp_f = length_penalty(stats_f.ref_len as usize, stats_f.hyp_len as usize);
    let lp = lp_e * lp_f;
    let lm_e = &system_fe.lm;
    let lm_f = &system_ef.lm;
    Ok(LossBreakdown::new(
        1.0 - bleu_or_zero(&stats_e, config.smoothing),
        1.0 - bleu_or_zero(&stats_f, config.smoothing),
        lm_loss(lm_f.per_word_entropy(&t_e)?, lm_f.per_word_entropy(sample_f)?, lp, config.hinge),
        lm_loss(lm_e.per_word_entropy(&t_f)?, lm_e.per_word_entropy(sample_e)?, lp, config.hinge),
        lp_e,
        lp_f,
    ))
}

#[derive(Debug, Clone)]
pub struct HalfRound {
    pub direction: Direction,
    pub breakdown: LossBreakdown,
    pub mert: MertSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MertSummary {
    pub steps: Vec<MertStep>,
    pub iterations: usize,
    pub initial_pool_loss: f64,
    pub final_pool_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AlternatingResult {
    pub weights_ef: LogLinearWeights,
    pub weights_fe: LogLinearWeights,
    pub initial: LossBreakdown,
    pub half_rounds: Vec<HalfRound>,
}

impl AlternatingResult {
    pub fn final_loss(&self) -> LossBreakdown {
        self.half_rounds.last().map_or(self.initial, |h| h.breakdown)
    }
}

/// Alternately tunes each direction with the other fixed. `config.rounds`
/// counts half-rounds, starting with E→F.
pub fn alternating_tune(
    system_ef: &System,
    system_fe: &System,
    sample_e: &[Sentence],
    sample_f: &[Sentence],
    config: &TuneConfig,
) -> Result<AlternatingResult> {
    if config.rounds == 0 {
        return Err(Error::InvalidArgument("at least one tuning round is required".into()));
    }
    let mut ef = system_ef.clone();
    let mut fe = system_fe.clone();
    let initial = unsupervised_loss(&ef, &fe, sample_e, sample_f, config)?;
    log::info!("tuning starts at {initial}");
    let mut half_rounds = Vec::new();
    let mut round_start = initial.total;
    for half in 0..config.rounds {
        let direction = if half % 2 == 0 { Direction::EF } else { Direction::FE };
        let half_config = TuneConfig {
            seed: config.seed.wrapping_add(half as u64),
            ..config.clone()
        };
        let result = match direction {
            Direction::EF => mert_optimize_direction(&ef, &fe, sample_e, sample_f, &half_config)?,
            Direction::FE => mert_optimize_direction(&fe, &ef, sample_f, sample_e, &half_config)?,
        };
        match direction {
            Direction::EF => ef.weights = result.weights,
            Direction::FE => fe.weights = result.weights,
        }
        let breakdown = unsupervised_loss(&ef, &fe, sample_e, sample_f, config)?;
        log::info!("after tuning {direction}: {breakdown}");
        half_rounds.push(HalfRound {
            direction,
            breakdown,
            mert: MertSummary {
                steps: result.steps,
                iterations: result.iterations,
                initial_pool_loss: result.initial_pool_loss,
                final_pool_loss: result.final_pool_loss,
            },
        });
        if half % 2 == 1 {
            let gain = (round_start - breakdown.total) / round_start.abs().max(f64::MIN_POSITIVE);
            if gain < config.round_tolerance {
                break;
            }
            round_start = breakdown.total;
        }
    }
    Ok(AlternatingResult {
        weights_ef: ef.weights,
        weights_fe: fe.weights,
        initial,
        half_rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_penalty_examples() {
        assert_eq!(length_penalty(1000, 1000), 1.0);
        assert_eq!(length_penalty(1000, 1500), 1.5);
        assert_eq!(length_penalty(1000, 700), 1.0);
    }

    #[test]
    fn lm_loss_examples() {
        let h = Hinge::TranslatedAboveNatural;
        assert_eq!(lm_loss(5.0, 5.0, 1.0, h), 0.0);
        assert_eq!(lm_loss(7.0, 5.0, 1.0, h), 4.0);
        assert_eq!(lm_loss(4.0, 5.0, 1.0, h), 0.0);
        assert_eq!(lm_loss(4.0, 5.0, 2.0, Hinge::NaturalAboveTranslated), 2.0);
    }

    #[test]
    fn breakdown_total_is_sum_of_parts() {
        let b = LossBreakdown::new(0.25, 0.5, 0.125, 1.0, 1.0, 1.2);
        assert_eq!(b.total, 0.25 + 0.5 + 0.125 + 1.0);
        assert_eq!(b.to_tsv().split('\t').count(), LossBreakdown::TSV_HEADER.split('\t').count());
    }

    #[test]
    fn envelope_of_crossing_lines() {
        // y = 1 + 0γ and y = 0 + 2γ cross at γ = 0.5
        let env = upper_envelope(&[(0.0, 1.0), (2.0, 0.0)]);
        assert_eq!(env, vec![(f64::NEG_INFINITY, 0), (0.5, 1)]);
        // a line under both never appears
        let env = upper_envelope(&[(0.0, 1.0), (1.0, -5.0), (2.0, 0.0)]);
        assert_eq!(env.iter().map(|e| e.1).collect::<Vec<_>>(), vec![0, 2]);
        // parallel lines keep the higher one
        let env = upper_envelope(&[(1.0, 0.0), (1.0, 2.0)]);
        assert_eq!(env, vec![(f64::NEG_INFINITY, 1)]);
    }
}

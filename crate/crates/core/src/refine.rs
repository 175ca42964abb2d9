//! Joint refinement of both translation directions.
//!
//! Each iteration back-translates monolingual text with the current systems
//! into two synthetic parallel corpora, one per direction. Phrase pairs are
//! extracted from word-aligned versions of both, and only pairs found in
//! both corpora are kept. Probabilities conditioned on a side are estimated
//! in the corpus where that side is real text.

use std::sync::Arc;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::decoder::LogLinearWeights;
use crate::error::{Error, Result};
use crate::phrase::{Phrase, Sentence};
use crate::phrase_induction::{lexical_weighting, subword_score, WordTranslationTable, DEFAULT_EPSILON};
use crate::phrase_table::{
    Orientation, OrientationProbs, PhraseScores, PhraseTable, PhraseTableEntry, ReorderingModel,
};
use crate::system::System;
use crate::tuning::{alternating_tune, AlternatingResult, Direction, TuneConfig};

pub const DEFAULT_CAP: usize = 10_000_000;
pub const DEFAULT_MAX_PHRASE_LEN: usize = 5;
pub const DEFAULT_SIGMA: f64 = 0.5;

/// Sentence pairs stored as (translated, original).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParallelCorpus {
    pub pairs: Vec<(Sentence, Sentence)>,
    /// The system that produced the translated side.
    pub translated_by: Direction,
    pub cap: usize,
}

impl SyntheticParallelCorpus {
    /// Pairs as (E side, F side) whichever side is synthetic.
    pub fn oriented_ef(&self) -> Vec<(Sentence, Sentence)> {
        self.pairs
            .iter()
            .map(|(syn, orig)| match self.translated_by {
                Direction::FE => (syn.clone(), orig.clone()),
                Direction::EF => (orig.clone(), syn.clone()),
            })
            .collect()
    }
}

/// Back-translates up to `cap` sentences of `mono` with `system`. Empty
/// translations are skipped.
pub fn generate_synthetic_corpus(
    system: &System,
    direction: Direction,
    mono: &[Sentence],
    cap: usize,
) -> SyntheticParallelCorpus {
    let originals = &mono[..mono.len().min(cap)];
    let translated = system.translate_corpus(originals);
    let mut pairs = Vec::with_capacity(originals.len());
    for (i, (syn, orig)) in translated.into_iter().zip(originals).enumerate() {
        if syn.is_empty() || orig.is_empty() {
            log::warn!("synthetic corpus {direction}: sentence {} skipped (empty side)", i + 1);
            continue;
        }
        pairs.push((syn, orig.clone()));
    }
    SyntheticParallelCorpus {
        pairs,
        translated_by: direction,
        cap,
    }
}

/// Word alignment links `(source index, target index)`, sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Alignment {
    links: Vec<(usize, usize)>,
}

impl Alignment {
    pub fn new(mut links: Vec<(usize, usize)>) -> Self {
        links.sort_unstable();
        links.dedup();
        Alignment { links }
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    pub fn contains(&self, s: usize, t: usize) -> bool {
        self.links.binary_search(&(s, t)).is_ok()
    }

    pub fn transposed(&self) -> Alignment {
        Alignment::new(self.links.iter().map(|&(s, t)| (t, s)).collect())
    }

    pub fn is_valid_for(&self, src_len: usize, tgt_len: usize) -> bool {
        self.links.iter().all(|&(s, t)| s < src_len && t < tgt_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignerConfig {
    pub model1_iterations: usize,
    pub model2_iterations: usize,
    /// Strength of the preference for links near the diagonal.
    pub tension: f64,
    /// Probability of aligning a word to the empty word.
    pub p_null: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            model1_iterations: 5,
            model2_iterations: 5,
            tension: 4.0,
            p_null: 0.08,
        }
    }
}

/// Corpus log-likelihoods (natural log) measured at each E-step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentReport {
    pub forward_model1: Vec<f64>,
    pub forward_model2: Vec<f64>,
    pub backward_model1: Vec<f64>,
    pub backward_model2: Vec<f64>,
}

fn intern_side<'a>(sentences: impl Iterator<Item = &'a Sentence>) -> (Vec<Vec<u32>>, usize) {
    let mut ids: FxHashMap<&str, u32> = FxHashMap::default();
    let mut out = Vec::new();
    for s in sentences {
        out.push(
            s.iter()
                .map(|w| {
                    let next = ids.len() as u32;
                    *ids.entry(w.as_str()).or_insert(next)
                })
                .collect(),
        );
    }
    (out, ids.len())
}

/// Translation parameters `t(produced | given)` laid out so every
/// (sentence, produced position, given position) has a direct slot.
struct LexicalParams {
    /// Parameter index per slot; the given position `n` is the empty word.
    slots: Vec<u32>,
    /// Start of each sentence pair's slots.
    offsets: Vec<usize>,
    /// Given word of each parameter, `null_id` for the empty word.
    given_of: Vec<u32>,
    t: Vec<f64>,
    num_given: usize,
}

impl LexicalParams {
    fn new(given: &[Vec<u32>], produced: &[Vec<u32>], num_given: usize, num_produced: usize) -> Self {
        let null_id = num_given as u32;
        let mut index: FxHashMap<(u32, u32), u32> = FxHashMap::default();
        let mut given_of = Vec::new();
        let mut slots = Vec::new();
        let mut offsets = Vec::with_capacity(given.len() + 1);
        for (g, p) in given.iter().zip(produced) {
            offsets.push(slots.len());
            for &pw in p {
                for gw in g.iter().copied().chain(std::iter::once(null_id)) {
                    let next = index.len() as u32;
                    let id = *index.entry((gw, pw)).or_insert_with(|| {
                        given_of.push(gw);
                        next
                    });
                    slots.push(id);
                }
            }
        }
        offsets.push(slots.len());
        let uniform = 1.0 / num_produced.max(1) as f64;
        LexicalParams {
            t: vec![uniform; given_of.len()],
            slots,
            offsets,
            given_of,
            num_given,
        }
    }

    /// One EM iteration with position weights from `prior`; returns the
    /// log-likelihood under the parameters before the update.
    fn em_step(&mut self, given: &[Vec<u32>], produced: &[Vec<u32>], prior: &dyn PositionPrior) -> f64 {
        let mut counts = vec![0.0; self.t.len()];
        let mut ll = 0.0;
        let mut post = Vec::new();
        let mut weights = Vec::new();
        for (k, (g, p)) in given.iter().zip(produced).enumerate() {
            let n = g.len();
            let m = p.len();
            let base = self.offsets[k];
            for j in 0..m {
                let row = &self.slots[base + j * (n + 1)..base + (j + 1) * (n + 1)];
                prior.row(j, n, m, &mut weights);
                post.clear();
                post.extend((0..=n).map(|i| weights[i] * self.t[row[i] as usize]));
                let z: f64 = post.iter().sum();
                if z <= 0.0 {
                    continue;
                }
                ll += z.ln();
                for (i, &v) in post.iter().enumerate() {
                    counts[row[i] as usize] += v / z;
                }
            }
        }
        let mut totals = vec![0.0; self.num_given + 1];
        for (c, &g) in counts.iter().zip(&self.given_of) {
            totals[g as usize] += c;
        }
        for ((t, c), &g) in self.t.iter_mut().zip(&counts).zip(&self.given_of) {
            let z = totals[g as usize];
            if z > 0.0 {
                *t = c / z;
            }
        }
        ll
    }

    /// Best given position for every produced word, `None` for the empty word.
    fn viterbi(&self, given: &[Vec<u32>], produced: &[Vec<u32>], prior: &dyn PositionPrior) -> Vec<Vec<Option<usize>>> {
        let mut weights = Vec::new();
        given
            .iter()
            .zip(produced)
            .enumerate()
            .map(|(k, (g, p))| {
                let n = g.len();
                let base = self.offsets[k];
                (0..p.len())
                    .map(|j| {
                        let row = &self.slots[base + j * (n + 1)..base + (j + 1) * (n + 1)];
                        prior.row(j, n, p.len(), &mut weights);
                        let mut best = (n, f64::NEG_INFINITY);
                        for i in 0..=n {
                            let v = weights[i] * self.t[row[i] as usize];
                            if v > best.1 {
                                best = (i, v);
                            }
                        }
                        (best.0 < n).then_some(best.0)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Weights of the given positions `0..=n` for produced position `j` of `m`;
/// position `n` is the empty word.
trait PositionPrior {
    fn row(&self, j: usize, n: usize, m: usize, out: &mut Vec<f64>);
}

struct Uniform;

impl PositionPrior for Uniform {
    fn row(&self, _: usize, n: usize, _: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(n + 1, 1.0 / (n + 1) as f64);
    }
}

/// Prefers links near the diagonal, `exp(−λ |i/n − j/m|)` with positions
/// taken at token centres.
struct Diagonal {
    tension: f64,
    p_null: f64,
}

impl PositionPrior for Diagonal {
    fn row(&self, j: usize, n: usize, m: usize, out: &mut Vec<f64>) {
        out.clear();
        let pos = (j as f64 + 0.5) / m as f64;
        out.extend((0..n).map(|i| (-self.tension * ((i as f64 + 0.5) / n as f64 - pos).abs()).exp()));
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v *= (1.0 - self.p_null) / z);
        out.push(self.p_null);
    }
}

/// Aligns `produced` words to `given` words in one direction.
fn align_direction(
    given: &[Vec<u32>],
    produced: &[Vec<u32>],
    num_given: usize,
    num_produced: usize,
    config: &AlignerConfig,
) -> (Vec<Vec<Option<usize>>>, Vec<f64>, Vec<f64>) {
    let mut params = LexicalParams::new(given, produced, num_given, num_produced);
    let model1: Vec<f64> = (0..config.model1_iterations)
        .map(|_| params.em_step(given, produced, &Uniform))
        .collect();
    let diag = Diagonal {
        tension: config.tension,
        p_null: config.p_null,
    };
    let model2: Vec<f64> = (0..config.model2_iterations)
        .map(|_| params.em_step(given, produced, &diag))
        .collect();
    let links = if config.model2_iterations > 0 {
        params.viterbi(given, produced, &diag)
    } else {
        params.viterbi(given, produced, &Uniform)
    };
    (links, model1, model2)
}

/// Aligns every pair in both directions and symmetrizes with
/// grow-diag-final-and.
pub fn align_words(pairs: &[(Sentence, Sentence)], config: &AlignerConfig) -> Result<(Vec<Alignment>, AlignmentReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("parallel corpus for alignment".into()));
    }
    let (src, ns) = intern_side(pairs.iter().map(|p| &p.0));
    let (tgt, nt) = intern_side(pairs.iter().map(|p| &p.1));
    let (fwd, forward_model1, forward_model2) = align_direction(&src, &tgt, ns, nt, config);
    let (bwd, backward_model1, backward_model2) = align_direction(&tgt, &src, nt, ns, config);
    let alignments = pairs
        .iter()
        .zip(fwd.iter().zip(&bwd))
        .map(|((s, t), (f, b))| {
            let f: Vec<(usize, usize)> = f.iter().enumerate().filter_map(|(j, i)| i.map(|i| (i, j))).collect();
            let b: Vec<(usize, usize)> = b.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
            grow_diag_final_and(&Alignment::new(f), &Alignment::new(b), s.len(), t.len())
        })
        .collect();
    Ok((
        alignments,
        AlignmentReport {
            forward_model1,
            forward_model2,
            backward_model1,
            backward_model2,
        },
    ))
}

/// Symmetrizes two directional alignments of a sentence pair.
pub fn grow_diag_final_and(forward: &Alignment, backward: &Alignment, src_len: usize, tgt_len: usize) -> Alignment {
    let fwd: FxHashSet<(usize, usize)> = forward.links().iter().copied().collect();
    let bwd: FxHashSet<(usize, usize)> = backward.links().iter().copied().collect();
    let mut current: FxHashSet<(usize, usize)> = fwd.intersection(&bwd).copied().collect();
    let mut src_aligned = vec![false; src_len];
    let mut tgt_aligned = vec![false; tgt_len];
    for &(s, t) in &current {
        src_aligned[s] = true;
        tgt_aligned[t] = true;
    }
    let union: FxHashSet<(usize, usize)> = fwd.union(&bwd).copied().collect();
    const NEIGHBOURS: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];
    loop {
        let mut added = false;
        for s in 0..src_len {
            for t in 0..tgt_len {
                if !current.contains(&(s, t)) {
                    continue;
                }
                for (ds, dt) in NEIGHBOURS {
                    let (ns, nt) = (s as isize + ds, t as isize + dt);
                    if ns < 0 || nt < 0 || ns >= src_len as isize || nt >= tgt_len as isize {
                        continue;
                    }
                    let (ns, nt) = (ns as usize, nt as usize);
                    if (!src_aligned[ns] || !tgt_aligned[nt]) && union.contains(&(ns, nt)) && current.insert((ns, nt)) {
                        src_aligned[ns] = true;
                        tgt_aligned[nt] = true;
                        added = true;
                    }
                }
            }
        }
        if !added {
            break;
        }
    }
    for side in [forward, backward] {
        for &(s, t) in side.links() {
            if !src_aligned[s] && !tgt_aligned[t] {
                current.insert((s, t));
                src_aligned[s] = true;
                tgt_aligned[t] = true;
            }
        }
    }
    Alignment::new(current.into_iter().collect())
}

/// A consistent phrase pair with its orientations. `prev`/`next` are
/// measured when translating source to target, `reverse_*` when the roles
/// of the two sides are swapped.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExtractedPair {
    pub source: Phrase,
    pub target: Phrase,
    /// Inclusive spans.
    pub source_span: (usize, usize),
    pub target_span: (usize, usize),
    pub prev: Orientation,
    pub next: Orientation,
    pub reverse_prev: Orientation,
    pub reverse_next: Orientation,
}

/// Every phrase pair of at most `max_len` tokens per side that is
/// consistent with `alignment`, extended over unaligned target words.
pub fn extract_phrase_pairs<S: AsRef<str>>(
    source: &[S],
    target: &[S],
    alignment: &Alignment,
    max_len: usize,
) -> Vec<ExtractedPair> {
    let ns = source.len();
    let nt = target.len();
    let mut grid = vec![false; ns * nt];
    let mut tgt_aligned = vec![false; nt];
    for &(s, t) in alignment.links() {
        if s < ns && t < nt {
            grid[s * nt + t] = true;
            tgt_aligned[t] = true;
        }
    }
    let aligned = |s: isize, t: isize| s >= 0 && t >= 0 && (s as usize) < ns && (t as usize) < nt && grid[s as usize * nt + t as usize];
    let mut out = Vec::new();
    for s1 in 0..ns {
        for s2 in s1..ns.min(s1 + max_len) {
            let (mut tmin, mut tmax) = (usize::MAX, 0);
            for s in s1..=s2 {
                for t in 0..nt {
                    if grid[s * nt + t] {
                        tmin = tmin.min(t);
                        tmax = tmax.max(t);
                    }
                }
            }
            if tmin == usize::MAX || tmax - tmin + 1 > max_len {
                continue;
            }
            let consistent = (tmin..=tmax).all(|t| (0..ns).all(|s| !grid[s * nt + t] || (s1..=s2).contains(&s)));
            if !consistent {
                continue;
            }
            let mut lo = tmin;
            while lo > 0 && !tgt_aligned[lo - 1] {
                lo -= 1;
            }
            let mut hi = tmax;
            while hi + 1 < nt && !tgt_aligned[hi + 1] {
                hi += 1;
            }
            for t1 in (lo..=tmin).rev() {
                for t2 in tmax..=hi {
                    if t2 - t1 + 1 > max_len {
                        break;
                    }
                    let (a1, a2, b1, b2) = (s1 as isize, s2 as isize, t1 as isize, t2 as isize);
                    let at_start = s1 == 0 && t1 == 0;
                    let at_end = s2 + 1 == ns && t2 + 1 == nt;
                    let pick = |mono: bool, swap: bool| {
                        if mono {
                            Orientation::Monotone
                        } else if swap {
                            Orientation::Swap
                        } else {
                            Orientation::Discontinuous
                        }
                    };
                    out.push(ExtractedPair {
                        source: Phrase::from_tokens(&source[s1..=s2]),
                        target: Phrase::from_tokens(&target[t1..=t2]),
                        source_span: (s1, s2),
                        target_span: (t1, t2),
                        prev: pick(at_start || aligned(a1 - 1, b1 - 1), aligned(a2 + 1, b1 - 1)),
                        next: pick(at_end || aligned(a2 + 1, b2 + 1), aligned(a1 - 1, b2 + 1)),
                        reverse_prev: pick(at_start || aligned(a1 - 1, b1 - 1), aligned(a1 - 1, b2 + 1)),
                        reverse_next: pick(at_end || aligned(a2 + 1, b2 + 1), aligned(a2 + 1, b1 - 1)),
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
struct Interner {
    ids: FxHashMap<Phrase, u32>,
    phrases: Vec<Phrase>,
}

impl Interner {
    fn intern(&mut self, p: &Phrase) -> u32 {
        if let Some(&id) = self.ids.get(p) {
            return id;
        }
        let id = self.phrases.len() as u32;
        self.ids.insert(p.clone(), id);
        self.phrases.push(p.clone());
        id
    }
}

/// Occurrence counts of one extraction run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub count: u64,
    /// Orientation counts `[prev m, s, d, next m, s, d]` translating source
    /// to target.
    pub forward: [u64; 6],
    /// The same with the roles of the sides swapped.
    pub reverse: [u64; 6],
}

/// Phrase-pair counts aggregated over a corpus.
#[derive(Debug, Clone, Default)]
pub struct ExtractionCounts {
    sources: Interner,
    targets: Interner,
    source_totals: Vec<u64>,
    target_totals: Vec<u64>,
    pairs: FxHashMap<(u32, u32), PairCounts>,
}

impl ExtractionCounts {
    pub fn add(&mut self, pair: &ExtractedPair) {
        let s = self.sources.intern(&pair.source);
        let t = self.targets.intern(&pair.target);
        if s as usize == self.source_totals.len() {
            self.source_totals.push(0);
        }
        if t as usize == self.target_totals.len() {
            self.target_totals.push(0);
        }
        self.source_totals[s as usize] += 1;
        self.target_totals[t as usize] += 1;
        let c = self.pairs.entry((s, t)).or_default();
        c.count += 1;
        c.forward[pair.prev.index()] += 1;
        c.forward[3 + pair.next.index()] += 1;
        c.reverse[pair.reverse_prev.index()] += 1;
        c.reverse[3 + pair.reverse_next.index()] += 1;
    }

    /// Extracts and counts pairs from an aligned corpus.
    pub fn from_corpus(pairs: &[(Sentence, Sentence)], alignments: &[Alignment], max_len: usize) -> Self {
        let mut counts = ExtractionCounts::default();
        for ((s, t), a) in pairs.iter().zip(alignments) {
            for p in extract_phrase_pairs(s, t, a, max_len) {
                counts.add(&p);
            }
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, source: &Phrase, target: &Phrase) -> Option<&PairCounts> {
        let s = *self.sources.ids.get(source)?;
        let t = *self.targets.ids.get(target)?;
        self.pairs.get(&(s, t))
    }

    pub fn source_count(&self, source: &Phrase) -> u64 {
        self.sources.ids.get(source).map_or(0, |&s| self.source_totals[s as usize])
    }

    pub fn target_count(&self, target: &Phrase) -> u64 {
        self.targets.ids.get(target).map_or(0, |&t| self.target_totals[t as usize])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Phrase, &Phrase, &PairCounts)> {
        self.pairs
            .iter()
            .map(|(&(s, t), c)| (&self.sources.phrases[s as usize], &self.targets.phrases[t as usize], c))
    }

    /// The same counts with source and target swapped.
    pub fn transposed(&self) -> ExtractionCounts {
        ExtractionCounts {
            sources: self.targets.clone(),
            targets: self.sources.clone(),
            source_totals: self.target_totals.clone(),
            target_totals: self.source_totals.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|(&(s, t), c)| {
                    (
                        (t, s),
                        PairCounts {
                            count: c.count,
                            forward: c.reverse,
                            reverse: c.forward,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Word translation tables `(p(t|s), p(s|t))` from link counts.
pub fn alignment_lexicon(pairs: &[(Sentence, Sentence)], alignments: &[Alignment]) -> (WordTranslationTable, WordTranslationTable) {
    let mut joint: FxHashMap<(&str, &str), u64> = FxHashMap::default();
    let mut src_tot: FxHashMap<&str, u64> = FxHashMap::default();
    let mut tgt_tot: FxHashMap<&str, u64> = FxHashMap::default();
    for ((s, t), a) in pairs.iter().zip(alignments) {
        for &(i, j) in a.links() {
            let (sw, tw) = (s[i].as_str(), t[j].as_str());
            *joint.entry((sw, tw)).or_default() += 1;
            *src_tot.entry(sw).or_default() += 1;
            *tgt_tot.entry(tw).or_default() += 1;
        }
    }
    let mut t_given_s = WordTranslationTable::default();
    let mut s_given_t = WordTranslationTable::default();
    for ((sw, tw), c) in joint {
        t_given_s.insert(sw, tw, c as f64 / src_tot[sw] as f64);
        s_given_t.insert(tw, sw, c as f64 / tgt_tot[tw] as f64);
    }
    (t_given_s, s_given_t)
}

/// Table over the pairs extracted from both corpora. `phi_fwd` comes from
/// the corpus whose source side is synthetic, `phi_bwd` from the one whose
/// target side is synthetic; no renormalization over the kept pairs.
pub fn estimate_phrase_table(
    synthetic_source: &ExtractionCounts,
    synthetic_target: &ExtractionCounts,
    lex_fwd: &WordTranslationTable,
    lex_bwd: &WordTranslationTable,
    epsilon: f64,
) -> Result<PhraseTable> {
    if synthetic_source.is_empty() || synthetic_target.is_empty() {
        return Err(Error::EmptyInput("phrase-pair extractions".into()));
    }
    let mut entries = Vec::new();
    for (src, tgt, c) in synthetic_source.iter() {
        let Some(other) = synthetic_target.get(src, tgt) else {
            continue;
        };
        let (lex_f, lex_b) = lexical_weighting(src, tgt, lex_fwd, lex_bwd);
        let (char_f, char_b) = subword_score(src, tgt, epsilon);
        entries.push(PhraseTableEntry {
            source: src.clone(),
            target: tgt.clone(),
            scores: PhraseScores {
                phi_fwd: c.count as f64 / synthetic_source.source_count(src) as f64,
                lex_fwd: lex_f,
                phi_bwd: other.count as f64 / synthetic_target.target_count(tgt) as f64,
                lex_bwd: lex_b,
                char_fwd: char_f,
                char_bwd: char_b,
            },
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyIntersection(String::new()));
    }
    Ok(PhraseTable::new(entries))
}

/// Rescales `phi_fwd` to sum to one over each source's options and
/// `phi_bwd` over each target's.
pub fn renormalized(table: &PhraseTable) -> PhraseTable {
    let mut by_src: FxHashMap<&Phrase, f64> = FxHashMap::default();
    let mut by_tgt: FxHashMap<&Phrase, f64> = FxHashMap::default();
    for e in table.entries() {
        *by_src.entry(&e.source).or_default() += e.scores.phi_fwd;
        *by_tgt.entry(&e.target).or_default() += e.scores.phi_bwd;
    }
    PhraseTable::new(
        table
            .entries()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.scores.phi_fwd /= by_src[&e.source];
                e.scores.phi_bwd /= by_tgt[&e.target];
                e
            })
            .collect(),
    )
}

/// Smoothed orientation distributions `(c + σ) / (total + 3σ)` for every
/// pair in `counts` that is also in `table`.
pub fn estimate_lexical_reordering(counts: &ExtractionCounts, table: &PhraseTable, sigma: f64) -> Result<ReorderingModel> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("phrase-pair extractions".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("reordering smoothing must be positive, got {sigma}")));
    }
    let mut probs = FxHashMap::default();
    for (src, tgt, c) in counts.iter() {
        if table.get(src, tgt).is_none() {
            continue;
        }
        probs.insert((src.clone(), tgt.clone()), orientation_distribution(&c.forward, sigma));
    }
    Ok(ReorderingModel::new(probs))
}

pub fn orientation_distribution(counts: &[u64; 6], sigma: f64) -> OrientationProbs {
    let mut p = [0.0; 6];
    for half in 0..2 {
        let c = &counts[3 * half..3 * half + 3];
        let total = c.iter().sum::<u64>() as f64 + 3.0 * sigma;
        for o in 0..3 {
            p[3 * half + o] = (c[o] as f64 + sigma) / total;
        }
    }
    p
}

/// Entries whose source phrase never occurs in `mono_src` or whose target
/// phrase never occurs in `mono_tgt`.
pub fn membership_violations(table: &PhraseTable, mono_src: &[Sentence], mono_tgt: &[Sentence]) -> Vec<(Phrase, Phrase)> {
    let found = |phrases: FxHashSet<&Phrase>, corpus: &[Sentence]| -> FxHashSet<Phrase> {
        let max_order = phrases.iter().map(|p| p.order()).max().unwrap_or(0);
        let mut seen = FxHashSet::default();
        for s in corpus {
            for start in 0..s.len() {
                for len in 1..=max_order.min(s.len() - start) {
                    let p = Phrase::from_tokens(&s[start..start + len]);
                    if phrases.contains(&p) {
                        seen.insert(p);
                    }
                }
            }
        }
        seen
    };
    let src = found(table.entries().iter().map(|e| &e.source).collect(), mono_src);
    let tgt = found(table.entries().iter().map(|e| &e.target).collect(), mono_tgt);
    table
        .entries()
        .iter()
        .filter(|e| !src.contains(&e.source) || !tgt.contains(&e.target))
        .map(|e| (e.source.clone(), e.target.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub iterations: usize,
    pub cap: usize,
    pub max_phrase_len: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub renormalize: bool,
    /// Keep at most this many options per source phrase.
    pub prune: Option<usize>,
    pub aligner: AlignerConfig,
    pub tune: TuneConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 3,
            cap: DEFAULT_CAP,
            max_phrase_len: DEFAULT_MAX_PHRASE_LEN,
            epsilon: DEFAULT_EPSILON,
            sigma: DEFAULT_SIGMA,
            renormalize: false,
            prune: None,
            aligner: AlignerConfig::default(),
            tune: TuneConfig::default(),
        }
    }
}

/// Both refined systems of one iteration plus what produced them.
#[derive(Debug, Clone)]
pub struct RefineIteration {
    pub iteration: usize,
    pub synthetic_pairs: (usize, usize),
    pub alignment: (AlignmentReport, AlignmentReport),
    pub table_sizes: (usize, usize),
    pub tuning: Option<AlternatingResult>,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub system_ef: System,
    pub system_fe: System,
    pub iterations: Vec<RefineIteration>,
}

/// Re-estimates both systems from the current ones. Returns the new
/// systems with the weights of the old ones.
pub fn refine_once(
    system_ef: &System,
    system_fe: &System,
    mono_e: &[Sentence],
    mono_f: &[Sentence],
    config: &RefineConfig,
) -> Result<(System, System, RefineIteration)> {
    // synthetic E with real F, and real E with synthetic F
    let syn_e = generate_synthetic_corpus(system_fe, Direction::FE, mono_f, config.cap);
    let syn_f = generate_synthetic_corpus(system_ef, Direction::EF, mono_e, config.cap);
    let corpus_a = syn_e.oriented_ef();
    let corpus_b = syn_f.oriented_ef();
    log::info!(
        "synthetic corpora: {} pairs with synthetic E, {} with synthetic F",
        corpus_a.len(),
        corpus_b.len()
    );
    let (align_a, report_a) = align_words(&corpus_a, &config.aligner)?;
    let (align_b, report_b) = align_words(&corpus_b, &config.aligner)?;
    let counts_a = ExtractionCounts::from_corpus(&corpus_a, &align_a, config.max_phrase_len);
    let counts_b = ExtractionCounts::from_corpus(&corpus_b, &align_b, config.max_phrase_len);
    let (a_f_given_e, _) = alignment_lexicon(&corpus_a, &align_a);
    let (_, b_e_given_f) = alignment_lexicon(&corpus_b, &align_b);

    let finish = |table: PhraseTable| {
        let table = if config.renormalize { renormalized(&table) } else { table };
        match config.prune {
            Some(k) => table.prune(k),
            None => table,
        }
    };
    let table_ef = finish(estimate_phrase_table(&counts_a, &counts_b, &a_f_given_e, &b_e_given_f, config.epsilon)?);
    let counts_b_fe = counts_b.transposed();
    let counts_a_fe = counts_a.transposed();
    let table_fe = finish(estimate_phrase_table(&counts_b_fe, &counts_a_fe, &b_e_given_f, &a_f_given_e, config.epsilon)?);
    // each direction's reordering comes from the corpus built by the other
    let reo_ef = estimate_lexical_reordering(&counts_a, &table_ef, config.sigma)?;
    let reo_fe = estimate_lexical_reordering(&counts_b_fe, &table_fe, config.sigma)?;
    log::info!("refined tables: {} E→F entries, {} F→E entries", table_ef.len(), table_fe.len());

    let iteration = RefineIteration {
        iteration: 0,
        synthetic_pairs: (corpus_a.len(), corpus_b.len()),
        alignment: (report_a, report_b),
        table_sizes: (table_ef.len(), table_fe.len()),
        tuning: None,
    };
    let rebuild = |old: &System, table: PhraseTable, reo: ReorderingModel| System {
        table: Arc::new(table),
        reordering: Some(Arc::new(reo)),
        lm: old.lm.clone(),
        weights: old.weights,
        config: old.config.clone(),
    };
    Ok((
        rebuild(system_ef, table_ef, reo_ef),
        rebuild(system_fe, table_fe, reo_fe),
        iteration,
    ))
}

/// Runs `config.iterations` refinement passes. Every pass but the last is
/// followed by alternating tuning on the samples; the last installs the
/// default weights.
pub fn refine_loop(
    system_ef: &System,
    system_fe: &System,
    mono_e: &[Sentence],
    mono_f: &[Sentence],
    samples: (&[Sentence], &[Sentence]),
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    if config.iterations == 0 {
        return Err(Error::InvalidArgument("at least one refinement iteration is required".into()));
    }
    let mut ef = system_ef.clone();
    let mut fe = system_fe.clone();
    let mut history = Vec::new();
    for it in 1..=config.iterations {
        let (new_ef, new_fe, mut report) = refine_once(&ef, &fe, mono_e, mono_f, config).map_err(|e| match e {
            Error::EmptyIntersection(_) => Error::EmptyIntersection(format!(" in refinement iteration {it}")),
            other => other,
        })?;
        report.iteration = it;
        ef = new_ef;
        fe = new_fe;
        if it < config.iterations {
            let tuned = alternating_tune(&ef, &fe, samples.0, samples.1, &config.tune)?;
            ef.weights = tuned.weights_ef;
            fe.weights = tuned.weights_fe;
            report.tuning = Some(tuned);
        } else {
            ef.weights = LogLinearWeights::defaults();
            fe.weights = LogLinearWeights::defaults();
        }
        history.push(report);
    }
    Ok(RefineOutcome {
        system_ef: ef,
        system_fe: fe,
        iterations: history,
    })
}

//! Log-linear phrase-based beam decoder.
//!
//! Search runs over stacks indexed by the number of covered source words.
//! Recombined states keep their best incoming arc plus a couple of
//! alternatives, and n-best lists are read off the resulting graph with lazy
//! k-best extraction. Every arc stores the exact feature delta it contributes,
//! so any emitted hypothesis carries features whose dot product with the
//! weights reproduces its score.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::corpus::{create, read_lines};
use crate::error::{Error, Result};
use crate::ngram_lm::LanguageModel;
use crate::phrase::Phrase;
use crate::phrase_induction::LEX_FLOOR;
use crate::phrase_table::{Orientation, PhraseTable, ReorderingModel};

pub const NUM_FEATURES: usize = 17;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "phi_fwd",
    "lex_fwd",
    "phi_bwd",
    "lex_bwd",
    "char_fwd",
    "char_bwd",
    "lm",
    "word_penalty",
    "phrase_penalty",
    "distortion",
    "reo_prev_mono",
    "reo_prev_swap",
    "reo_prev_disc",
    "reo_next_mono",
    "reo_next_swap",
    "reo_next_disc",
    "unk",
];

pub const LM: usize = 6;
pub const WORD_PENALTY: usize = 7;
pub const PHRASE_PENALTY: usize = 8;
pub const DISTORTION: usize = 9;
pub const REO_PREV: usize = 10;
pub const REO_NEXT: usize = 13;
pub const UNK: usize = 16;

/// Sentences longer than this are decoded in independent chunks.
pub const MAX_SENTENCE_LEN: usize = 128;
/// Recombination keeps this many alternatives besides the best arc.
const ALTERNATIVE_ARCS: usize = 2;

pub type Features = [f64; NUM_FEATURES];

pub fn score_hypothesis(features: &[f64], weights: &[f64]) -> Result<f64> {
    if features.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: features.len(),
        });
    }
    Ok(features.iter().zip(weights).map(|(f, w)| f * w).sum())
}

fn dot(a: &Features, b: &Features) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut Features, delta: &Features) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinearWeights(pub Features);

impl LogLinearWeights {
    /// Fixed weight of the unknown-word feature; never tuned.
    pub const UNK_WEIGHT: f64 = -100.0;

    /// The documented default vector: translation features 0.2, lm 0.5,
    /// word penalty −1, phrase penalty 0.2, distortion 0.3, reordering 0.3.
    pub fn defaults() -> Self {
        let mut w = [0.0; NUM_FEATURES];
        w[..6].fill(0.2);
        w[LM] = 0.5;
        w[WORD_PENALTY] = -1.0;
        w[PHRASE_PENALTY] = 0.2;
        w[DISTORTION] = 0.3;
        w[REO_PREV..UNK].fill(0.3);
        w[UNK] = Self::UNK_WEIGHT;
        LogLinearWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, features: &Features) -> f64 {
        dot(&self.0, features)
    }

    /// Indices that tuning may change.
    pub fn tunable(with_reordering: bool) -> Vec<usize> {
        (0..UNK)
            .filter(|&i| with_reordering || !(REO_PREV..UNK).contains(&i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.0.iter().position(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight `{}` is not finite",
                FEATURE_NAMES[i]
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        for (name, v) in FEATURE_NAMES.iter().zip(&self.0) {
            writeln!(w, "{name}\t{v}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads `name<TAB>value` lines. Features not listed keep their default.
    pub fn load(path: &Path) -> Result<Self> {
        let what = path.display().to_string();
        let mut weights = Self::defaults();
        for (i, line) in read_lines(path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&what, i + 1, "expected name<TAB>value"))?;
            let idx = FEATURE_NAMES
                .iter()
                .position(|n| *n == name.trim())
                .ok_or_else(|| Error::parse(&what, i + 1, format!("unknown feature `{name}`")))?;
            weights.0[idx] = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(&what, i + 1, format!("bad value `{value}`")))?;
        }
        weights.validate()?;
        Ok(weights)
    }
}

impl Default for LogLinearWeights {
    fn default() -> Self {
        Self::defaults()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnkHandling {
    /// Copy unknown source tokens to the output.
    #[default]
    Copy,
    /// Translate unknown source tokens into nothing.
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub beam_size: usize,
    pub distortion_limit: usize,
    pub max_phrase_len: usize,
    pub nbest: usize,
    /// Options kept per source span, best first by estimated score.
    pub max_options: usize,
    pub unk: UnkHandling,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam_size: 100,
            distortion_limit: 6,
            max_phrase_len: 5,
            nbest: 100,
            max_options: 20,
            unk: UnkHandling::Copy,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_phrase_len == 0 || self.nbest == 0 || self.max_options == 0 {
            return Err(Error::InvalidArgument(
                "beam size, phrase length, n-best size and option limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivationStep {
    /// Source span `[start, end)`.
    pub span: (usize, usize),
    pub source: Phrase,
    pub target: Phrase,
    pub copied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationHypothesis {
    pub tokens: Vec<String>,
    pub features: Features,
    pub score: f64,
    pub derivation: Vec<DerivationStep>,
}

impl TranslationHypothesis {
    fn empty() -> Self {
        TranslationHypothesis {
            tokens: Vec::new(),
            features: [0.0; NUM_FEATURES],
            score: 0.0,
            derivation: Vec::new(),
        }
    }

    pub fn surface(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A translation option for one source span.
#[derive(Debug, Clone)]
pub struct TranslationOption {
    pub start: usize,
    pub end: usize,
    pub source: Phrase,
    pub target: Phrase,
    pub target_ids: Vec<u32>,
    /// Natural logs of the six table scores.
    pub tm: [f64; 6],
    /// Natural logs of the orientation probabilities, when reordering is on.
    pub reordering: Option<[f64; 6]>,
    pub copied: bool,
}

/// Everything the search needs about one sentence: the options for every
/// span and the future-cost table.
#[derive(Debug, Clone)]
pub struct SentenceOptions {
    pub len: usize,
    pub options: Vec<TranslationOption>,
    /// Option ids per `(start, span length)`.
    by_span: FxHashMap<(usize, usize), Vec<usize>>,
    /// `future[i][j]`: best estimated score for covering `[i, j)`.
    future: Vec<Vec<f64>>,
}

impl SentenceOptions {
    pub fn span(&self, start: usize, len: usize) -> &[usize] {
        self.by_span.get(&(start, len)).map_or(&[], Vec::as_slice)
    }

    pub fn future_cost(&self, start: usize, end: usize) -> f64 {
        self.future[start][end]
    }

    /// Sum of future costs over the maximal uncovered runs.
    fn coverage_future(&self, coverage: u128) -> f64 {
        let mut total = 0.0;
        let mut i = 0;
        while i < self.len {
            if coverage & (1 << i) != 0 {
                i += 1;
                continue;
            }
            let start = i;
            while i < self.len && coverage & (1 << i) == 0 {
                i += 1;
            }
            total += self.future[start][i];
        }
        total
    }
}

/// ln(1/3), used for phrase pairs the reordering model has not seen.
const UNIFORM_ORIENTATION: f64 = -1.0986122886681098;

/// Source-side orientation of `(start, end)` following `(prev_start,
/// prev_end)`, spans inclusive.
pub fn orientation(prev_start: i64, prev_end: i64, start: i64, end: i64) -> Orientation {
    if start == prev_end + 1 {
        Orientation::Monotone
    } else if end == prev_start - 1 {
        Orientation::Swap
    } else {
        Orientation::Discontinuous
    }
}

/// Whether a phrase `[start, end)` may follow `prev_end` (exclusive end of
/// the previous phrase) given the coverage after the expansion.
pub fn expansion_allowed(prev_end: usize, start: usize, end: usize, new_coverage: u128, len: usize, limit: usize) -> bool {
    if start.abs_diff(prev_end) > limit {
        return false;
    }
    let first_gap = (0..len).find(|&i| new_coverage & (1 << i) == 0).unwrap_or(len);
    first_gap >= end || end - first_gap <= limit
}

fn span_mask(start: usize, len: usize) -> u128 {
    let ones = if len >= 128 { u128::MAX } else { (1u128 << len) - 1 };
    ones << start
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct StateKey {
    coverage: u128,
    prev_start: usize,
    prev_end: usize,
    prev_option: usize,
    context: Vec<u32>,
}

#[derive(Debug, Clone)]
struct Arc {
    parent: usize,
    option: usize,
    delta: Features,
    /// `weights · delta`.
    gain: f64,
    score: f64,
}

#[derive(Debug, Clone)]
struct Node {
    key: StateKey,
    score: f64,
    future: f64,
    /// Best arc first; empty for the root.
    arcs: Vec<Arc>,
}

const NO_OPTION: usize = usize::MAX;

/// Inclusive source span of the last phrase, or a virtual phrase just
/// before the sentence.
fn previous_span(key: &StateKey) -> (i64, i64) {
    if key.prev_option == NO_OPTION {
        (-1, -1)
    } else {
        (key.prev_start as i64, key.prev_end as i64 - 1)
    }
}

/// A decoder over borrowed models.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub table: &'a PhraseTable,
    pub reordering: Option<&'a ReorderingModel>,
    pub lm: &'a LanguageModel,
    pub weights: &'a LogLinearWeights,
    pub config: &'a DecoderConfig,
}

impl fmt::Debug for Decoder<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Decoder")
            .field("entries", &self.table.len())
            .field("reordering", &self.reordering.is_some())
            .field("config", self.config)
            .finish()
    }
}

impl<'a> Decoder<'a> {
    pub fn new(
        table: &'a PhraseTable,
        reordering: Option<&'a ReorderingModel>,
        lm: &'a LanguageModel,
        weights: &'a LogLinearWeights,
        config: &'a DecoderConfig,
    ) -> Self {
        Decoder {
            table,
            reordering,
            lm,
            weights,
            config,
        }
    }

    fn w(&self) -> &Features {
        &self.weights.0
    }

    /// Estimated score of an option in isolation, used for option pruning and
    /// future costs.
    fn estimate(&self, option: &TranslationOption) -> f64 {
        let w = self.w();
        let mut est = 0.0;
        for (k, v) in option.tm.iter().enumerate() {
            est += w[k] * v;
        }
        let mut ctx: Vec<u32> = Vec::new();
        let mut lm = 0.0;
        for &id in &option.target_ids {
            lm += self.lm.ln_prob(&ctx, id);
            ctx.push(id);
        }
        est += w[LM] * lm;
        est -= w[WORD_PENALTY] * option.target_ids.len() as f64;
        est += w[PHRASE_PENALTY];
        if option.copied {
            est += w[UNK];
        }
        est
    }

    pub fn collect_options<S: AsRef<str>>(&self, sentence: &[S]) -> SentenceOptions {
        let n = sentence.len();
        let max_len = self.config.max_phrase_len.min(self.table.max_source_order().max(1));
        let mut options = Vec::new();
        let mut by_span: FxHashMap<(usize, usize), Vec<usize>> = FxHashMap::default();
        for start in 0..n {
            for len in 1..=max_len.min(n - start) {
                let source = Phrase::from_tokens(&sentence[start..start + len]);
                let entries = self.table.options(&source);
                let mut scored: Vec<(f64, TranslationOption)> = entries
                    .iter()
                    .map(|e| {
                        let reordering = self.reordering.map(|r| {
                            r.get(&e.source, &e.target)
                                .map(|p| p.map(|v| v.max(LEX_FLOOR).ln()))
                                .unwrap_or([UNIFORM_ORIENTATION; 6])
                        });
                        let opt = TranslationOption {
                            start,
                            end: start + len,
                            source: e.source.clone(),
                            target: e.target.clone(),
                            target_ids: e.target.tokens().map(|t| self.lm.id(t)).collect(),
                            tm: e.scores.to_array().map(|v| v.max(LEX_FLOOR).ln()),
                            reordering,
                            copied: false,
                        };
                        (self.estimate(&opt), opt)
                    })
                    .collect();
                if len == 1 && entries.is_empty() {
                    let token = sentence[start].as_ref();
                    let target = match self.config.unk {
                        UnkHandling::Copy => Phrase::parse(token),
                        UnkHandling::Drop => Phrase::parse(""),
                    };
                    let opt = TranslationOption {
                        start,
                        end: start + 1,
                        source: source.clone(),
                        target_ids: target.tokens().map(|t| self.lm.id(t)).collect(),
                        target,
                        tm: [0.0; 6],
                        reordering: self.reordering.map(|_| [UNIFORM_ORIENTATION; 6]),
                        copied: true,
                    };
                    scored.push((self.estimate(&opt), opt));
                }
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.target.cmp(&b.1.target)));
                scored.truncate(self.config.max_options);
                if scored.is_empty() {
                    continue;
                }
                let ids = by_span.entry((start, len)).or_default();
                for (_, opt) in scored {
                    ids.push(options.len());
                    options.push(opt);
                }
            }
        }

        let mut future = vec![vec![f64::NEG_INFINITY; n + 1]; n + 1];
        for (i, row) in future.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for len in 1..=n {
            for start in 0..=n - len {
                let end = start + len;
                let mut best = by_span
                    .get(&(start, len))
                    .map(|ids| ids.iter().map(|&o| self.estimate(&options[o])).fold(f64::NEG_INFINITY, f64::max))
                    .unwrap_or(f64::NEG_INFINITY);
                for mid in start + 1..end {
                    best = best.max(future[start][mid] + future[mid][end]);
                }
                future[start][end] = best;
            }
        }
        SentenceOptions {
            len: n,
            options,
            by_span,
            future,
        }
    }

    /// Feature delta of applying `option` in state `key`, and the successor
    /// LM context.
    fn extend(&self, key: &StateKey, opts: &SentenceOptions, option: usize) -> (Features, Vec<u32>) {
        let opt = &opts.options[option];
        let mut delta = [0.0; NUM_FEATURES];
        delta[..6].copy_from_slice(&opt.tm);
        let mut ctx = key.context.clone();
        let mut lm = 0.0;
        for &id in &opt.target_ids {
            lm += self.lm.ln_prob(&ctx, id);
            ctx.push(id);
        }
        self.lm.trim_context(&mut ctx);
        delta[LM] = lm;
        delta[WORD_PENALTY] = -(opt.target_ids.len() as f64);
        delta[PHRASE_PENALTY] = 1.0;
        delta[DISTORTION] = -(opt.start.abs_diff(key.prev_end) as f64);
        if let Some(reo) = &opt.reordering {
            let (ps, pe) = previous_span(key);
            let o = orientation(ps, pe, opt.start as i64, opt.end as i64 - 1).index();
            delta[REO_PREV + o] += reo[o];
            if key.prev_option != NO_OPTION {
                if let Some(prev) = &opts.options[key.prev_option].reordering {
                    delta[REO_NEXT + o] += prev[3 + o];
                }
            }
        }
        if opt.copied {
            delta[UNK] = 1.0;
        }
        (delta, ctx)
    }

    /// End-of-sentence delta: `</s>` under the LM and the last phrase's
    /// orientation towards the sentence end.
    fn finish(&self, key: &StateKey, opts: &SentenceOptions) -> Features {
        let mut delta = [0.0; NUM_FEATURES];
        delta[LM] = self.lm.ln_prob(&key.context, self.lm.eos());
        if key.prev_option != NO_OPTION {
            if let Some(prev) = &opts.options[key.prev_option].reordering {
                let n = opts.len as i64;
                let (ps, pe) = previous_span(key);
                let o = orientation(ps, pe, n, n).index();
                delta[REO_NEXT + o] += prev[3 + o];
            }
        }
        delta
    }

    fn search(&self, opts: &SentenceOptions) -> (Vec<Node>, usize) {
        let n = opts.len;
        let limit = self.config.distortion_limit;
        let max_len = self.config.max_phrase_len;
        let root_key = StateKey {
            coverage: 0,
            prev_start: 0,
            prev_end: 0,
            prev_option: NO_OPTION,
            context: vec![self.lm.bos()],
        };
        let mut nodes = vec![Node {
            future: opts.coverage_future(0),
            key: root_key,
            score: 0.0,
            arcs: Vec::new(),
        }];
        let mut stacks: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        let mut lookup: Vec<FxHashMap<StateKey, usize>> = vec![FxHashMap::default(); n + 1];
        stacks[0].push(0);
        let full = span_mask(0, n);

        for covered in 0..n {
            let mut stack = std::mem::take(&mut stacks[covered]);
            stack.sort_by(|&a, &b| {
                let (x, y) = (&nodes[a], &nodes[b]);
                (y.score + y.future).total_cmp(&(x.score + x.future)).then(a.cmp(&b))
            });
            stack.truncate(self.config.beam_size);
            for &id in &stack {
                let key = nodes[id].key.clone();
                let parent_score = nodes[id].score;
                for start in 0..n {
                    if key.coverage & (1 << start) != 0 {
                        continue;
                    }
                    for len in 1..=max_len.min(n - start) {
                        let end = start + len;
                        if key.coverage & (1 << (end - 1)) != 0 {
                            break;
                        }
                        let coverage = key.coverage | span_mask(start, len);
                        if !expansion_allowed(key.prev_end, start, end, coverage, n, limit) {
                            continue;
                        }
                        for &o in opts.span(start, len) {
                            let (delta, context) = self.extend(&key, opts, o);
                            let gain = dot(self.w(), &delta);
                            let score = parent_score + gain;
                            let with_reordering = self.reordering.is_some();
                            let new_key = StateKey {
                                coverage,
                                prev_start: if with_reordering { start } else { 0 },
                                prev_end: end,
                                prev_option: if with_reordering { o } else { NO_OPTION },
                                context,
                            };
                            let arc = Arc {
                                parent: id,
                                option: o,
                                delta,
                                gain,
                                score,
                            };
                            let target = covered + len;
                            match lookup[target].get(&new_key) {
                                Some(&existing) => {
                                    let node = &mut nodes[existing];
                                    let pos = node.arcs.partition_point(|a| a.score >= score);
                                    if pos <= ALTERNATIVE_ARCS {
                                        node.arcs.insert(pos, arc);
                                        node.arcs.truncate(ALTERNATIVE_ARCS + 1);
                                        node.score = node.arcs[0].score;
                                    }
                                }
                                None => {
                                    let future = if coverage == full { 0.0 } else { opts.coverage_future(coverage) };
                                    lookup[target].insert(new_key.clone(), nodes.len());
                                    stacks[target].push(nodes.len());
                                    nodes.push(Node {
                                        key: new_key,
                                        score,
                                        future,
                                        arcs: vec![arc],
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut finals = std::mem::take(&mut stacks[n]);
        finals.sort_by(|&a, &b| nodes[b].score.total_cmp(&nodes[a].score).then(a.cmp(&b)));
        finals.truncate(self.config.beam_size);
        let mut goal_arcs: Vec<Arc> = finals
            .iter()
            .map(|&id| {
                let delta = self.finish(&nodes[id].key, opts);
                let gain = dot(self.w(), &delta);
                Arc {
                    parent: id,
                    option: NO_OPTION,
                    delta,
                    gain,
                    score: nodes[id].score + gain,
                }
            })
            .collect();
        goal_arcs.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.parent.cmp(&b.parent)));
        let goal = nodes.len();
        nodes.push(Node {
            key: StateKey {
                coverage: full,
                prev_start: 0,
                prev_end: 0,
                prev_option: NO_OPTION,
                context: Vec::new(),
            },
            score: goal_arcs.first().map_or(f64::NEG_INFINITY, |a| a.score),
            future: 0.0,
            arcs: goal_arcs,
        });
        (nodes, goal)
    }

    fn nbest_chunk<S: AsRef<str>>(&self, sentence: &[S], n: usize) -> Vec<TranslationHypothesis> {
        let opts = self.collect_options(sentence);
        let (nodes, goal) = self.search(&opts);
        if nodes[goal].arcs.is_empty() {
            return Vec::new();
        }
        let mut kbest = KBest::new(&nodes);
        let mut seen: FxHashMap<String, ()> = FxHashMap::default();
        let mut out = Vec::new();
        let max_paths = n.saturating_mul(20).max(50);
        for k in 0..max_paths {
            if out.len() >= n || kbest.get(goal, k).is_none() {
                break;
            }
            let path = kbest.path(goal, k);
            let hyp = self.assemble(&opts, &nodes, &path);
            if seen.insert(hyp.surface(), ()).is_none() {
                out.push(hyp);
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }

    fn assemble(&self, opts: &SentenceOptions, nodes: &[Node], path: &[(usize, usize)]) -> TranslationHypothesis {
        let mut hyp = TranslationHypothesis::empty();
        for &(node, arc) in path {
            let arc = &nodes[node].arcs[arc];
            add_into(&mut hyp.features, &arc.delta);
            if arc.option != NO_OPTION {
                let opt = &opts.options[arc.option];
                hyp.tokens.extend(opt.target.tokens().map(String::from));
                hyp.derivation.push(DerivationStep {
                    span: (opt.start, opt.end),
                    source: opt.source.clone(),
                    target: opt.target.clone(),
                    copied: opt.copied,
                });
            }
        }
        hyp.score = self.weights.dot(&hyp.features);
        hyp
    }

    /// Up to `n` surface-distinct hypotheses, best first.
    pub fn nbest<S: AsRef<str> + Sync>(&self, sentence: &[S], n: usize) -> Vec<TranslationHypothesis> {
        if sentence.len() <= MAX_SENTENCE_LEN {
            return self.nbest_chunk(sentence, n.max(1));
        }
        // Long inputs: decode chunks independently and concatenate the best
        // of each.
        let mut combined = TranslationHypothesis::empty();
        for (c, chunk) in sentence.chunks(MAX_SENTENCE_LEN).enumerate() {
            let Some(best) = self.nbest_chunk(chunk, 1).into_iter().next() else {
                return Vec::new();
            };
            add_into(&mut combined.features, &best.features);
            combined.tokens.extend(best.tokens);
            let offset = c * MAX_SENTENCE_LEN;
            combined.derivation.extend(best.derivation.into_iter().map(|mut d| {
                d.span = (d.span.0 + offset, d.span.1 + offset);
                d
            }));
        }
        combined.score = self.weights.dot(&combined.features);
        vec![combined]
    }

    pub fn translate<S: AsRef<str> + Sync>(&self, sentence: &[S]) -> TranslationHypothesis {
        self.nbest(sentence, 1)
            .into_iter()
            .next()
            .unwrap_or_else(TranslationHypothesis::empty)
    }

    pub fn translate_corpus<S: AsRef<str> + Sync>(&self, corpus: &[Vec<S>]) -> Vec<TranslationHypothesis> {
        corpus.par_iter().map(|s| self.translate(s)).collect()
    }

    pub fn nbest_corpus<S: AsRef<str> + Sync>(&self, corpus: &[Vec<S>], n: usize) -> Vec<Vec<TranslationHypothesis>> {
        corpus.par_iter().map(|s| self.nbest(s, n)).collect()
    }
}

/// A derivation in a node's k-best list: the arc taken and the rank of the
/// parent's derivation it extends.
#[derive(Debug, Clone, Copy)]
struct Derivation {
    score: f64,
    arc: usize,
    rank: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate(Derivation);

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .score
            .total_cmp(&other.0.score)
            .then_with(|| other.0.arc.cmp(&self.0.arc))
            .then_with(|| other.0.rank.cmp(&self.0.rank))
    }
}

/// Lazy k-best extraction over the search graph.
struct KBest<'a> {
    nodes: &'a [Node],
    lists: Vec<Vec<Derivation>>,
    heaps: Vec<Option<BinaryHeap<Candidate>>>,
}

impl<'a> KBest<'a> {
    fn new(nodes: &'a [Node]) -> Self {
        KBest {
            nodes,
            lists: vec![Vec::new(); nodes.len()],
            heaps: vec![None; nodes.len()],
        }
    }

    /// Score of the `k`-th best derivation reaching node `v`.
    fn get(&mut self, v: usize, k: usize) -> Option<f64> {
        if self.nodes[v].arcs.is_empty() {
            return (k == 0).then_some(0.0);
        }
        if self.heaps[v].is_none() {
            let mut heap = BinaryHeap::new();
            for (a, arc) in self.nodes[v].arcs.iter().enumerate() {
                if let Some(s) = self.get(arc.parent, 0) {
                    heap.push(Candidate(Derivation {
                        score: s + arc.gain,
                        arc: a,
                        rank: 0,
                    }));
                }
            }
            self.heaps[v] = Some(heap);
        }
        while self.lists[v].len() <= k {
            let Some(Candidate(best)) = self.heaps[v].as_mut().and_then(BinaryHeap::pop) else {
                break;
            };
            self.lists[v].push(best);
            let arc = &self.nodes[v].arcs[best.arc];
            let (parent, gain) = (arc.parent, arc.gain);
            if let Some(s) = self.get(parent, best.rank + 1) {
                self.heaps[v].as_mut().unwrap().push(Candidate(Derivation {
                    score: s + gain,
                    arc: best.arc,
                    rank: best.rank + 1,
                }));
            }
        }
        self.lists[v].get(k).map(|d| d.score)
    }

    /// `(node, arc)` pairs from the root to `v` for its `k`-th derivation.
    fn path(&self, mut v: usize, mut k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        while !self.nodes[v].arcs.is_empty() {
            let d = self.lists[v][k];
            out.push((v, d.arc));
            v = self.nodes[v].arcs[d.arc].parent;
            k = d.rank;
        }
        out.reverse();
        out
    }
}

/// Writes `sent_id ||| tokens ||| name=value ... ||| score` lines.
pub fn write_nbest<W: Write>(mut w: W, sent_id: usize, hyps: &[TranslationHypothesis]) -> std::io::Result<()> {
    for h in hyps {
        let feats: Vec<String> = FEATURE_NAMES
            .iter()
            .zip(&h.features)
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        writeln!(w, "{sent_id} ||| {} ||| {} ||| {}", h.surface(), feats.join(" "), h.score)?;
    }
    Ok(())
}

/// Parses an n-best file into `(sent_id, tokens, features, score)` rows.
pub fn read_nbest(path: &Path) -> Result<Vec<(usize, Vec<String>, Features, f64)>> {
    let what = path.display().to_string();
    let mut rows = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("|||").map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(&what, i + 1, "expected four `|||` fields"));
        }
        let id = fields[0].parse().map_err(|_| Error::parse(&what, i + 1, "bad sentence id"))?;
        let mut features = [0.0; NUM_FEATURES];
        for pair in fields[2].split_whitespace() {
            let (name, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::parse(&what, i + 1, format!("bad feature `{pair}`")))?;
            let idx = FEATURE_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::parse(&what, i + 1, format!("unknown feature `{name}`")))?;
            features[idx] = value.parse().map_err(|_| Error::parse(&what, i + 1, "bad feature value"))?;
        }
        let score = fields[3].parse().map_err(|_| Error::parse(&what, i + 1, "bad score"))?;
        rows.push((id, fields[1].split_whitespace().map(String::from).collect(), features, score));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram_lm::{LanguageModel, LmConfig};
    use crate::phrase_table::{PhraseScores, PhraseTableEntry};

    fn table(rows: &[(&str, &str, f64)]) -> PhraseTable {
        PhraseTable::new(
            rows.iter()
                .map(|(s, t, p)| PhraseTableEntry {
                    source: Phrase::parse(s),
                    target: Phrase::parse(t),
                    scores: PhraseScores::from_array([*p; 6]),
                })
                .collect(),
        )
    }

    fn lm(lines: &[&str], order: usize) -> LanguageModel {
        let corpus: Vec<Vec<String>> = lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect();
        LanguageModel::train(
            &corpus,
            &LmConfig {
                order,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn single_word_matches_hand_score() {
        let t = table(&[("casa", "house", 0.5)]);
        let m = lm(&["house"], 1);
        let w = LogLinearWeights::defaults();
        let c = DecoderConfig::default();
        let d = Decoder::new(&t, None, &m, &w, &c);
        let h = d.translate(&["casa"]);
        assert_eq!(h.tokens, vec!["house"]);
        let lm_ln = (m.lm_logprob(&["house"])) * std::f64::consts::LN_10;
        let expected = 6.0 * 0.2 * 0.5f64.ln() + 0.5 * lm_ln + 1.0 + 0.2;
        assert!((h.score - expected).abs() < 1e-9);
    }

    #[test]
    fn oov_token_is_copied() {
        let t = table(&[("casa", "house", 0.5)]);
        let m = lm(&["house"], 2);
        let w = LogLinearWeights::defaults();
        let c = DecoderConfig::default();
        let h = Decoder::new(&t, None, &m, &w, &c).translate(&["zzz"]);
        assert_eq!(h.tokens, vec!["zzz"]);
        assert_eq!(h.features[UNK], 1.0);
    }

    #[test]
    fn empty_sentence_gives_empty_output() {
        let t = table(&[("a", "x", 0.5)]);
        let m = lm(&["x"], 2);
        let w = LogLinearWeights::defaults();
        let c = DecoderConfig::default();
        let h = Decoder::new(&t, None, &m, &w, &c).translate::<&str>(&[]);
        assert!(h.tokens.is_empty());
    }

    #[test]
    fn scores_are_dot_products() {
        let t = table(&[("a", "x", 0.5), ("a", "y", 0.3), ("b", "z", 0.6), ("a b", "x z", 0.2), ("b", "w", 0.1)]);
        let m = lm(&["x z", "y w", "z x"], 3);
        let w = LogLinearWeights::defaults();
        let c = DecoderConfig::default();
        let hyps = Decoder::new(&t, None, &m, &w, &c).nbest(&["a", "b"], 10);
        assert!(hyps.len() >= 4);
        for pair in hyps.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        for h in &hyps {
            assert!((score_hypothesis(&h.features, w.as_slice()).unwrap() - h.score).abs() < 1e-9);
        }
    }

    #[test]
    fn score_hypothesis_checks_lengths() {
        assert!(score_hypothesis(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(score_hypothesis(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.txt");
        let mut w = LogLinearWeights::defaults();
        w.0[3] = -0.123456789;
        w.save(&path).unwrap();
        assert_eq!(LogLinearWeights::load(&path).unwrap(), w);
    }

    #[test]
    fn nbest_file_round_trip() {
        let t = table(&[("a", "x", 0.5), ("a", "y", 0.3)]);
        let m = lm(&["x", "y"], 2);
        let w = LogLinearWeights::defaults();
        let c = DecoderConfig::default();
        let hyps = Decoder::new(&t, None, &m, &w, &c).nbest(&["a"], 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nbest.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        write_nbest(&mut f, 7, &hyps).unwrap();
        drop(f);
        let rows = read_nbest(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, 7);
        assert_eq!(rows[0].2, hyps[0].features);
        assert_eq!(rows[0].3, hyps[0].score);
    }
}

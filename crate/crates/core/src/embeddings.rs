//! Phrase embeddings trained with skip-gram negative sampling.
//!
//! Targets are every inventory phrase occurring in a sentence (unigrams,
//! bigrams and trigrams alike); contexts are the unigram tokens within
//! `window` positions to the left of the phrase start and to the right of the
//! phrase end. Tokens inside the phrase are never their own context.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedAliasIndex};
use rustc_hash::FxHashMap;

use crate::corpus::{create, read_lines, PhraseInventory, MAX_PHRASE_ORDER};
use crate::error::{Error, Result};
use crate::phrase::{Phrase, Sentence};

/// Dense vectors of a fixed dimension keyed by phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    dim: usize,
    phrases: Vec<Phrase>,
    index: FxHashMap<Phrase, usize>,
    data: Vec<f64>,
}

impl EmbeddingSpace {
    /// `data` holds `phrases.len() * dim` values in row-major order.
    pub fn new(dim: usize, phrases: Vec<Phrase>, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if data.len() != phrases.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} phrases of dimension {}",
                data.len(),
                phrases.len(),
                dim
            )));
        }
        let mut index = FxHashMap::default();
        for (i, p) in phrases.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate phrase `{p}`")));
            }
        }
        Ok(EmbeddingSpace {
            dim,
            phrases,
            index,
            data,
        })
    }

    pub fn from_rows(phrases: Vec<Phrase>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("rows differ in dimension".into()));
        }
        Self::new(dim, phrases, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> &[Phrase] {
        &self.phrases
    }

    pub fn phrase(&self, i: usize) -> &Phrase {
        &self.phrases[i]
    }

    pub fn index_of(&self, phrase: &Phrase) -> Option<usize> {
        self.index.get(phrase).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, phrase: &Phrase) -> Option<&[f64]> {
        self.index_of(phrase).map(|i| self.row(i))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Keeps only the rows whose index is selected, preserving order.
    pub fn subset(&self, keep: impl Fn(usize, &Phrase) -> bool) -> EmbeddingSpace {
        let mut phrases = Vec::new();
        let mut data = Vec::new();
        for (i, p) in self.phrases.iter().enumerate() {
            if keep(i, p) {
                phrases.push(p.clone());
                data.extend_from_slice(self.row(i));
            }
        }
        EmbeddingSpace::new(self.dim, phrases, data).expect("subset of a valid space")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.len(), self.dim).map_err(io)?;
        for i in 0..self.len() {
            write!(w, "{}\t", self.phrases[i]).map_err(io)?;
            for (k, v) in self.row(i).iter().enumerate() {
                if k > 0 {
                    w.write_all(b" ").map_err(io)?;
                }
                write!(w, "{v}").map_err(io)?;
            }
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let lines = read_lines(path)?;
        let header = lines
            .first()
            .ok_or_else(|| Error::parse(&name, 1, "missing header"))?;
        let mut it = header.split_whitespace();
        let (count, dim): (usize, usize) = match (it.next(), it.next()) {
            (Some(c), Some(d)) => (
                c.parse().map_err(|_| Error::parse(&name, 1, "bad count"))?,
                d.parse().map_err(|_| Error::parse(&name, 1, "bad dimension"))?,
            ),
            _ => return Err(Error::parse(&name, 1, "expected `count dimension`")),
        };
        let mut phrases = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for (i, line) in lines.iter().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let (phrase, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&name, i + 1, "expected phrase<TAB>values"))?;
            let before = data.len();
            for v in values.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| Error::parse(&name, i + 1, "bad value"))?);
            }
            if data.len() - before != dim {
                return Err(Error::parse(&name, i + 1, format!("expected {dim} values")));
            }
            phrases.push(Phrase::parse(phrase));
        }
        if phrases.len() != count {
            return Err(Error::parse(&name, 1, format!("header announces {count} rows, found {}", phrases.len())));
        }
        EmbeddingSpace::new(dim, phrases, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgnsConfig {
    pub dimension: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Linearly decayed to `1e-4` of its value over the whole run.
    pub learning_rate: f64,
    /// Frequency threshold for discarding unigram targets; `0` disables it.
    pub subsample: f64,
    pub seed: u64,
    /// Worker count. `1` is the deterministic serial mode; larger values run
    /// lock-free workers on shared parameters.
    pub threads: usize,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dimension: 300,
            window: 5,
            negatives: 10,
            epochs: 5,
            learning_rate: 0.025,
            subsample: 1e-5,
            seed: 1,
            threads: 1,
        }
    }
}

impl SgnsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.window == 0 || self.epochs == 0 || self.threads == 0 {
            return Err(Error::InvalidArgument(
                "dimension, window, epochs and threads must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.subsample < 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Every `(target phrase, context token)` pair of one sentence.
pub fn extract_training_pairs(
    sentence: &Sentence,
    inventory: &PhraseInventory,
    window: usize,
) -> Vec<(Phrase, String)> {
    let mut pairs = Vec::new();
    for start in 0..sentence.len() {
        for len in 1..=MAX_PHRASE_ORDER.min(sentence.len() - start) {
            let phrase = Phrase::from_tokens(&sentence[start..start + len]);
            if !inventory.contains(&phrase) {
                continue;
            }
            for pos in context_positions(start, len, sentence.len(), window) {
                pairs.push((phrase.clone(), sentence[pos].clone()));
            }
        }
    }
    pairs
}

fn context_positions(start: usize, len: usize, n: usize, window: usize) -> impl Iterator<Item = usize> {
    let left = start.saturating_sub(window)..start;
    let end = start + len;
    let right = end..(end + window).min(n);
    left.chain(right)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ln_sigmoid(x: f64) -> f64 {
    // log σ(x) = -log(1 + e^{-x}), stable for both signs
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `-log σ(t·c) - Σ_k log σ(-t·n_k)`.
pub fn sgns_loss(target: &[f64], context: &[f64], negatives: &[Vec<f64>]) -> f64 {
    -ln_sigmoid(dot(target, context)) - negatives.iter().map(|n| ln_sigmoid(-dot(target, n))).sum::<f64>()
}

/// Analytic gradients of [`sgns_loss`] with respect to the target, the
/// context and each negative vector.
pub fn sgns_gradients(
    target: &[f64],
    context: &[f64],
    negatives: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let pos = sigmoid(dot(target, context)) - 1.0;
    let mut grad_t: Vec<f64> = context.iter().map(|c| pos * c).collect();
    let grad_c: Vec<f64> = target.iter().map(|t| pos * t).collect();
    let mut grad_n = Vec::with_capacity(negatives.len());
    for n in negatives {
        let s = sigmoid(dot(target, n));
        for (g, v) in grad_t.iter_mut().zip(n) {
            *g += s * v;
        }
        grad_n.push(target.iter().map(|t| s * t).collect());
    }
    (grad_t, grad_c, grad_n)
}

/// One gradient step on the negative-sampling loss of a single pair. All
/// gradients are taken at the current point before any vector moves.
pub fn sgns_update(
    target: &mut [f64],
    context: &mut [f64],
    negatives: &mut [Vec<f64>],
    learning_rate: f64,
) {
    let (gt, gc, gn) = sgns_gradients(target, context, negatives);
    for (x, g) in target.iter_mut().zip(&gt) {
        *x -= learning_rate * g;
    }
    for (x, g) in context.iter_mut().zip(&gc) {
        *x -= learning_rate * g;
    }
    for (n, g) in negatives.iter_mut().zip(&gn) {
        for (x, gi) in n.iter_mut().zip(g) {
            *x -= learning_rate * gi;
        }
    }
}

/// Draws context tokens from the unigram distribution raised to 0.75.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    probs: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl NegativeSampler {
    pub fn new(counts: &[u64]) -> Result<Self> {
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyInput("negative sampling needs positive counts".into()));
        }
        let probs = weights.iter().map(|w| w / total).collect();
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::InvalidArgument(format!("negative sampler: {e}")))?;
        Ok(NegativeSampler { probs, alias })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.alias.sample(rng)
    }
}

/// Parameter matrix shared by lock-free workers. Relaxed atomic loads and
/// stores let concurrent updates race (some are lost) without undefined
/// behaviour; with a single worker the arithmetic is identical to a plain
/// `Vec<f64>`.
struct SharedMatrix {
    dim: usize,
    data: Vec<AtomicU64>,
}

impl SharedMatrix {
    fn new(rows: usize, dim: usize, init: impl FnMut() -> f64) -> Self {
        let mut init = init;
        SharedMatrix {
            dim,
            data: (0..rows * dim).map(|_| AtomicU64::new(init().to_bits())).collect(),
        }
    }

    #[inline]
    fn load(&self, row: usize, out: &mut [f64]) {
        let base = row * self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            *o = f64::from_bits(self.data[base + k].load(Ordering::Relaxed));
        }
    }

    #[inline]
    fn add(&self, row: usize, delta: &[f64], scale: f64) {
        let base = row * self.dim;
        for (k, d) in delta.iter().enumerate() {
            let cell = &self.data[base + k];
            let v = f64::from_bits(cell.load(Ordering::Relaxed)) + scale * d;
            cell.store(v.to_bits(), Ordering::Relaxed);
        }
    }

    fn into_vec(self) -> Vec<f64> {
        self.data.into_iter().map(|a| f64::from_bits(a.into_inner())).collect()
    }
}

/// Corpus and inventory encoded as integer ids for training.
struct Encoded {
    sentences: Vec<Vec<u32>>,
    /// Token id to context (unigram) row, if the token is an inventory unigram.
    context_of: Vec<Option<u32>>,
    context_counts: Vec<u64>,
    unigram_target: Vec<Option<u32>>,
    bigram_target: FxHashMap<(u32, u32), u32>,
    trigram_target: FxHashMap<(u32, u32, u32), u32>,
    /// Keep probability per token for unigram-target subsampling.
    keep_prob: Vec<f64>,
    total_tokens: u64,
}

impl Encoded {
    fn new(corpus: &[Sentence], inventory: &PhraseInventory, subsample: f64) -> Self {
        let mut vocab: FxHashMap<&str, u32> = FxHashMap::default();
        let mut token_counts: Vec<u64> = Vec::new();
        let sentences: Vec<Vec<u32>> = corpus
            .iter()
            .map(|s| {
                s.iter()
                    .map(|t| {
                        let next = vocab.len() as u32;
                        let id = *vocab.entry(t.as_str()).or_insert(next);
                        if id as usize == token_counts.len() {
                            token_counts.push(0);
                        }
                        token_counts[id as usize] += 1;
                        id
                    })
                    .collect()
            })
            .collect();
        let n_tokens = vocab.len();
        let mut context_of = vec![None; n_tokens];
        let mut context_counts = Vec::new();
        let mut unigram_target = vec![None; n_tokens];
        let mut bigram_target = FxHashMap::default();
        let mut trigram_target = FxHashMap::default();
        for (row, (phrase, count)) in inventory.entries().iter().enumerate() {
            let ids: Option<Vec<u32>> = phrase.tokens().map(|t| vocab.get(t).copied()).collect();
            let Some(ids) = ids else { continue };
            match ids[..] {
                [a] => {
                    context_of[a as usize] = Some(context_counts.len() as u32);
                    context_counts.push(*count);
                    unigram_target[a as usize] = Some(row as u32);
                }
                [a, b] => {
                    bigram_target.insert((a, b), row as u32);
                }
                [a, b, c] => {
                    trigram_target.insert((a, b, c), row as u32);
                }
                _ => {}
            }
        }
        let total_tokens: u64 = token_counts.iter().sum();
        let keep_prob = token_counts
            .iter()
            .map(|&c| {
                if subsample <= 0.0 || total_tokens == 0 {
                    return 1.0;
                }
                let f = c as f64 / total_tokens as f64;
                (((f / subsample).sqrt() + 1.0) * subsample / f).min(1.0)
            })
            .collect();
        Encoded {
            sentences,
            context_of,
            context_counts,
            unigram_target,
            bigram_target,
            trigram_target,
            keep_prob,
            total_tokens,
        }
    }

    #[inline]
    fn target_at(&self, s: &[u32], start: usize, len: usize) -> Option<u32> {
        match len {
            1 => self.unigram_target[s[start] as usize],
            2 => self.bigram_target.get(&(s[start], s[start + 1])).copied(),
            3 => self.trigram_target.get(&(s[start], s[start + 1], s[start + 2])).copied(),
            _ => None,
        }
    }
}

/// Loss after each epoch on a fixed monitoring sample of pairs (index 0 is
/// the loss before training).
#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
}

struct Monitor {
    pairs: Vec<(u32, u32, Vec<u32>)>,
}

impl Monitor {
    fn loss(&self, input: &SharedMatrix, output: &SharedMatrix, dim: usize) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let mut t = vec![0.0; dim];
        let mut c = vec![0.0; dim];
        let mut total = 0.0;
        for (target, ctx, negs) in &self.pairs {
            input.load(*target as usize, &mut t);
            output.load(*ctx as usize, &mut c);
            let negs: Vec<Vec<f64>> = negs
                .iter()
                .map(|&n| {
                    let mut v = vec![0.0; dim];
                    output.load(n as usize, &mut v);
                    v
                })
                .collect();
            total += sgns_loss(&t, &c, &negs);
        }
        total / self.pairs.len() as f64
    }
}

const MONITOR_PAIRS: usize = 2000;

/// Trains phrase embeddings and returns the input matrix rows for every
/// inventory phrase, in inventory order.
pub fn train_phrase_embeddings(
    corpus: &[Sentence],
    inventory: &PhraseInventory,
    config: &SgnsConfig,
) -> Result<EmbeddingSpace> {
    train_phrase_embeddings_with_report(corpus, inventory, config).map(|(space, _)| space)
}

pub fn train_phrase_embeddings_with_report(
    corpus: &[Sentence],
    inventory: &PhraseInventory,
    config: &SgnsConfig,
) -> Result<(EmbeddingSpace, TrainingReport)> {
    config.validate()?;
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput("embedding training corpus is empty".into()));
    }
    if inventory.is_empty() {
        return Err(Error::EmptyInput("phrase inventory is empty".into()));
    }
    let enc = Encoded::new(corpus, inventory, config.subsample);
    if enc.context_counts.is_empty() {
        return Err(Error::EmptyInput("inventory has no unigram contexts".into()));
    }
    let sampler = NegativeSampler::new(&enc.context_counts)?;
    let dim = config.dimension;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let input = SharedMatrix::new(inventory.len(), dim, || (rng.gen::<f64>() - 0.5) / dim as f64);
    let output = SharedMatrix::new(enc.context_counts.len(), dim, || 0.0);

    let monitor = build_monitor(&enc, config, &sampler, &mut rng);
    let mut report = TrainingReport::default();
    report.epoch_losses.push(monitor.loss(&input, &output, dim));

    let total_work = (enc.total_tokens * config.epochs as u64).max(1);
    let progress = AtomicU64::new(0);
    for epoch in 0..config.epochs {
        let worker = |w: usize, shard: &[Vec<u32>]| {
            let seed = config
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((epoch * 1_000_003 + w) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            train_shard(shard, &enc, config, &sampler, &input, &output, &progress, total_work, &mut rng);
        };
        if config.threads == 1 {
            worker(0, &enc.sentences);
        } else {
            let shard_len = enc.sentences.len().div_ceil(config.threads).max(1);
            std::thread::scope(|scope| {
                for (w, shard) in enc.sentences.chunks(shard_len).enumerate() {
                    let worker = &worker;
                    scope.spawn(move || worker(w, shard));
                }
            });
        }
        let loss = monitor.loss(&input, &output, dim);
        log::debug!("sgns epoch {} monitor loss {:.5}", epoch + 1, loss);
        report.epoch_losses.push(loss);
    }

    let space = EmbeddingSpace::new(
        dim,
        inventory.entries().iter().map(|(p, _)| p.clone()).collect(),
        input.into_vec(),
    )?;
    Ok((space, report))
}

fn build_monitor(enc: &Encoded, config: &SgnsConfig, sampler: &NegativeSampler, rng: &mut ChaCha8Rng) -> Monitor {
    let mut pairs = Vec::new();
    'outer: for s in &enc.sentences {
        for start in 0..s.len() {
            for len in 1..=MAX_PHRASE_ORDER.min(s.len() - start) {
                let Some(target) = enc.target_at(s, start, len) else { continue };
                for pos in context_positions(start, len, s.len(), config.window) {
                    if let Some(ctx) = enc.context_of[s[pos] as usize] {
                        let negs = (0..config.negatives).map(|_| sampler.sample(rng) as u32).collect();
                        pairs.push((target, ctx, negs));
                        if pairs.len() >= MONITOR_PAIRS {
                            break 'outer;
                        }
                    }
                }
            }
        }
    }
    Monitor { pairs }
}

#[allow(clippy::too_many_arguments)]
fn train_shard(
    shard: &[Vec<u32>],
    enc: &Encoded,
    config: &SgnsConfig,
    sampler: &NegativeSampler,
    input: &SharedMatrix,
    output: &SharedMatrix,
    progress: &AtomicU64,
    total_work: u64,
    rng: &mut ChaCha8Rng,
) {
    let dim = config.dimension;
    let mut t = vec![0.0; dim];
    let mut o = vec![0.0; dim];
    let mut neu1e = vec![0.0; dim];
    for s in shard {
        let done = progress.fetch_add(s.len() as u64, Ordering::Relaxed);
        let lr = config.learning_rate * (1.0 - done as f64 / total_work as f64).max(1e-4);
        for start in 0..s.len() {
            for len in 1..=MAX_PHRASE_ORDER.min(s.len() - start) {
                let Some(target) = enc.target_at(s, start, len) else { continue };
                if len == 1 && enc.keep_prob[s[start] as usize] < 1.0 && rng.gen::<f64>() >= enc.keep_prob[s[start] as usize] {
                    continue;
                }
                for pos in context_positions(start, len, s.len(), config.window) {
                    let Some(ctx) = enc.context_of[s[pos] as usize] else { continue };
                    input.load(target as usize, &mut t);
                    neu1e.iter_mut().for_each(|x| *x = 0.0);
                    for d in 0..=config.negatives {
                        let (row, label) = if d == 0 {
                            (ctx, 1.0)
                        } else {
                            let n = sampler.sample(rng) as u32;
                            if n == ctx {
                                continue;
                            }
                            (n, 0.0)
                        };
                        output.load(row as usize, &mut o);
                        // descent step: g = lr * (label - σ(t·o))
                        let g = lr * (label - sigmoid(dot(&t, &o)));
                        for k in 0..dim {
                            neu1e[k] += g * o[k];
                        }
                        output.add(row as usize, &t, g);
                    }
                    input.add(target as usize, &neu1e, 1.0);
                }
            }
        }
    }
}

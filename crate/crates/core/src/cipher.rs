//! Synthetic cipher benchmark.
//!
//! Sentences of an artificial language E are drawn from a sparse word
//! Markov chain. Language F is E under a fixed word bijection, applied to a
//! disjoint set of sentences, so the two corpora share no parallel text.
//! Numerals and punctuation map to themselves and act as the anchors that
//! seed the embedding mapping. The bijection is the ground truth for the
//! lexicon, the phrase table and held-out translation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedAliasIndex};
use rustc_hash::{FxHashMap, FxHashSet};

use crate::bleu::{bleu_stats, corpus_bleu, BleuStats, Smoothing};
use crate::corpus::{build_ngram_inventory, InventoryCaps};
use crate::crossmap::{normalize_embeddings, precision_at_1, self_learn, Retrieval, SelfLearnConfig};
use crate::decoder::DecoderConfig;
use crate::embeddings::{train_phrase_embeddings, SgnsConfig};
use crate::error::{Error, Result};
use crate::ngram_lm::{LanguageModel, LmConfig};
use crate::phrase::{Phrase, Sentence};
use crate::phrase_induction::{build_initial_phrase_table, InductionConfig};
use crate::phrase_table::PhraseTable;
use crate::refine::{membership_violations, refine_loop, RefineConfig};
use crate::system::System;
use crate::tuning::{alternating_tune, unsupervised_loss, LossBreakdown, TuneConfig};

pub const PUNCTUATION: [&str; 6] = [",", ".", ";", ":", "?", "!"];

/// Tokens spelled the same in both languages: punctuation and the numerals
/// `0..numerals`.
pub fn anchors(numerals: usize) -> Vec<String> {
    PUNCTUATION
        .iter()
        .map(|p| p.to_string())
        .chain((0..numerals).map(|n| n.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CipherConfig {
    /// Sentences per monolingual corpus.
    pub sentences: usize,
    pub held_out: usize,
    /// Non-anchor words.
    pub vocab_size: usize,
    /// Successors per word in the Markov chain.
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Shared numerals; together with punctuation they seed the mapping.
    pub numerals: usize,
    pub seed: u64,
}

impl Default for CipherConfig {
    fn default() -> Self {
        CipherConfig {
            sentences: 50_000,
            held_out: 500,
            vocab_size: 1500,
            branching: 12,
            min_len: 4,
            max_len: 20,
            numerals: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CipherCorpora {
    pub mono_e: Vec<Sentence>,
    pub mono_f: Vec<Sentence>,
    /// Held-out E sentences and their encipherments.
    pub test_e: Vec<Sentence>,
    pub test_f: Vec<Sentence>,
    /// E word → F word, anchors included.
    pub cipher: FxHashMap<String, String>,
}

impl CipherCorpora {
    pub fn encipher(&self, sentence: &[String]) -> Sentence {
        sentence.iter().map(|w| self.cipher[w].clone()).collect()
    }

    /// The `n` most frequent non-anchor E words of `mono_e` with their
    /// ciphers; ties broken by spelling.
    pub fn lexicon(&self, n: usize) -> Vec<(Phrase, Phrase)> {
        let mut counts: FxHashMap<&str, u64> = FxHashMap::default();
        for s in &self.mono_e {
            for w in s {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, u64)> = counts.into_iter().filter(|(w, _)| self.cipher[*w] != *w).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        words
            .into_iter()
            .take(n)
            .map(|(w, _)| (Phrase::parse(w), Phrase::parse(&self.cipher[w])))
            .collect()
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng, onsets: &[&str], vowels: &[&str]) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(onsets[rng.gen_range(0..onsets.len())]);
        w.push_str(vowels[rng.gen_range(0..vowels.len())]);
    }
    w
}

fn vocabulary(rng: &mut ChaCha8Rng, n: usize, onsets: &[&str], vowels: &[&str], taken: &FxHashSet<String>) -> Vec<String> {
    let mut seen = FxHashSet::default();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, onsets, vowels);
        if !taken.contains(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Generates both corpora, the held-out set and the bijection.
pub fn generate_cipher_corpora(config: &CipherConfig) -> Result<CipherCorpora> {
    if config.vocab_size == 0 || config.branching == 0 || config.min_len == 0 || config.max_len < config.min_len {
        return Err(Error::InvalidArgument("cipher vocabulary, branching and lengths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e_words = vocabulary(
        &mut rng,
        config.vocab_size,
        &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"],
        &["a", "e", "i", "o", "u"],
        &FxHashSet::default(),
    );
    let taken: FxHashSet<String> = e_words.iter().cloned().collect();
    let f_words = vocabulary(
        &mut rng,
        config.vocab_size,
        &["ch", "sh", "th", "kr", "pl", "gw", "q", "x", "h", "j", "w", "y"],
        &["a", "e", "i", "o", "u", "ae", "ou"],
        &taken,
    );
    let mut cipher: FxHashMap<String, String> = e_words.iter().cloned().zip(f_words.iter().cloned()).collect();
    let anchors = anchors(config.numerals);
    for a in &anchors {
        cipher.insert(a.clone(), a.clone());
    }

    // words in random frequency ranks, anchors included
    let mut words: Vec<String> = e_words.clone();
    words.extend(anchors);
    words.shuffle(&mut rng);
    let zipf: Vec<f64> = (0..words.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let prior = WeightedAliasIndex::new(zipf.clone()).map_err(|e| Error::Degenerate(e.to_string()))?;
    let mut successors: Vec<(Vec<usize>, WeightedAliasIndex<f64>)> = Vec::with_capacity(words.len());
    for _ in 0..words.len() {
        let mut next = FxHashSet::default();
        while next.len() < config.branching.min(words.len()) {
            next.insert(prior.sample(&mut rng));
        }
        let mut next: Vec<usize> = next.into_iter().collect();
        next.sort_unstable();
        let weights: Vec<f64> = next.iter().map(|_| rng.gen::<f64>().powi(3) + 1e-3).collect();
        let table = WeightedAliasIndex::new(weights).map_err(|e| Error::Degenerate(e.to_string()))?;
        successors.push((next, table));
    }
    let sentence = |rng: &mut ChaCha8Rng| -> Sentence {
        let len = rng.gen_range(config.min_len..=config.max_len);
        let mut cur = prior.sample(rng);
        let mut out = vec![words[cur].clone()];
        while out.len() < len {
            let (next, table) = &successors[cur];
            cur = next[table.sample(rng)];
            out.push(words[cur].clone());
        }
        out
    };
    let mono_e: Vec<Sentence> = (0..config.sentences).map(|_| sentence(&mut rng)).collect();
    let plain_f: Vec<Sentence> = (0..config.sentences).map(|_| sentence(&mut rng)).collect();
    let test_e: Vec<Sentence> = (0..config.held_out).map(|_| sentence(&mut rng)).collect();
    let encipher = |s: &Sentence| -> Sentence { s.iter().map(|w| cipher[w].clone()).collect() };
    let mono_f = plain_f.iter().map(encipher).collect();
    let test_f = test_e.iter().map(encipher).collect();
    Ok(CipherCorpora {
        mono_e,
        mono_f,
        test_e,
        test_f,
        cipher,
    })
}

/// Settings for every stage of the experiment, scaled for one machine.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub caps: InventoryCaps,
    pub sgns: SgnsConfig,
    pub mapping: SelfLearnConfig,
    pub induction: InductionConfig,
    pub lm_order: usize,
    pub decoder: DecoderConfig,
    pub tune_sample: usize,
    pub tune: TuneConfig,
    pub refine: RefineConfig,
    pub lexicon_size: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let tune = TuneConfig {
            nbest: 20,
            rounds: 2,
            max_iterations: 3,
            ..Default::default()
        };
        ExperimentSettings {
            caps: InventoryCaps::new(5_000, 10_000, 10_000),
            sgns: SgnsConfig {
                dimension: 64,
                epochs: 5,
                subsample: 1e-3,
                ..Default::default()
            },
            mapping: SelfLearnConfig {
                vocab_cutoff: 4_000,
                retrieval: Retrieval::CSLS,
                ..Default::default()
            },
            induction: InductionConfig {
                k: 20,
                max_phrases: 10_000,
                ..Default::default()
            },
            lm_order: 5,
            decoder: DecoderConfig {
                beam_size: 20,
                nbest: 20,
                ..Default::default()
            },
            tune_sample: 100,
            refine: RefineConfig {
                iterations: 1,
                cap: 3_000,
                tune: tune.clone(),
                ..Default::default()
            },
            tune,
            lexicon_size: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub mapping_p_at_1: f64,
    pub table_top1_accuracy: f64,
    pub loss_at_defaults: LossBreakdown,
    pub loss_after_tuning: LossBreakdown,
    pub accepted_steps: usize,
    pub loss_increasing_steps: usize,
    pub initial_bleu: f64,
    pub refined_bleu: f64,
    pub refined_entries: usize,
    pub membership_violations: usize,
    /// (stage, seconds)
    pub timings: Vec<(&'static str, f64)>,
}

impl ExperimentReport {
    pub fn tuning_reduction(&self) -> f64 {
        (self.loss_at_defaults.total - self.loss_after_tuning.total) / self.loss_at_defaults.total
    }
}

/// Fraction of `lexicon` sources whose highest-`phi_fwd` option is the
/// expected target.
pub fn table_top1_accuracy(table: &PhraseTable, lexicon: &[(Phrase, Phrase)]) -> f64 {
    if lexicon.is_empty() {
        return 0.0;
    }
    let hits = lexicon
        .iter()
        .filter(|(s, t)| {
            table
                .options(s)
                .iter()
                .max_by(|a, b| a.scores.phi_fwd.total_cmp(&b.scores.phi_fwd).then(b.target.cmp(&a.target)))
                .is_some_and(|e| &e.target == t)
        })
        .count();
    hits as f64 / lexicon.len() as f64
}

pub fn held_out_bleu(system: &System, source: &[Sentence], reference: &[Sentence]) -> f64 {
    let hyps = system.translate_corpus(source);
    let stats: BleuStats = hyps.iter().zip(reference).map(|(h, r)| bleu_stats(h, r)).sum();
    corpus_bleu(&stats, Smoothing::None).unwrap_or(0.0)
}

fn sample(corpus: &[Sentence], n: usize, rng: &mut ChaCha8Rng) -> Vec<Sentence> {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| corpus[i].clone()).collect()
}

/// Runs every stage on the cipher corpora and measures each criterion.
pub fn run_cipher_experiment(corpora: &CipherCorpora, settings: &ExperimentSettings) -> Result<ExperimentReport> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, f64)>| {
        let now = Instant::now();
        timings.push((name, (now - clock).as_secs_f64()));
        log::info!("cipher stage {name}: {:.1}s", (now - clock).as_secs_f64());
        clock = now;
    };

    let inv_e = build_ngram_inventory(&corpora.mono_e, settings.caps);
    let inv_f = build_ngram_inventory(&corpora.mono_f, settings.caps);
    lap("inventory", &mut timings);
    let emb_e = train_phrase_embeddings(&corpora.mono_e, &inv_e, &settings.sgns)?;
    let emb_f = train_phrase_embeddings(
        &corpora.mono_f,
        &inv_f,
        &SgnsConfig {
            seed: settings.sgns.seed.wrapping_add(1),
            ..settings.sgns.clone()
        },
    )?;
    lap("embed", &mut timings);
    let norm_e = normalize_embeddings(&emb_e)?;
    let norm_f = normalize_embeddings(&emb_f)?;
    let mapping = self_learn(&norm_e, &norm_f, &settings.mapping)?;
    let mapped_e = mapping.map_src(&norm_e);
    let mapped_f = mapping.map_tgt(&norm_f);
    let lexicon = corpora.lexicon(settings.lexicon_size);
    let mapping_p_at_1 = precision_at_1(&mapped_e, &mapped_f, &lexicon);
    lap("map", &mut timings);
    let table_ef = build_initial_phrase_table(&mapped_e, &mapped_f, &settings.induction)?.table;
    let table_fe = build_initial_phrase_table(&mapped_f, &mapped_e, &settings.induction)?.table;
    let table_top1_accuracy = table_top1_accuracy(&table_ef, &lexicon);
    lap("induce", &mut timings);
    let lm_config = LmConfig {
        order: settings.lm_order,
        ..Default::default()
    };
    let lm_e = std::sync::Arc::new(LanguageModel::train(&corpora.mono_e, &lm_config)?);
    let lm_f = std::sync::Arc::new(LanguageModel::train(&corpora.mono_f, &lm_config)?);
    lap("lm", &mut timings);

    let ef = System::new(table_ef, lm_f, settings.decoder.clone());
    let fe = System::new(table_fe, lm_e, settings.decoder.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(settings.tune.seed);
    let sample_e = sample(&corpora.mono_e, settings.tune_sample, &mut rng);
    let sample_f = sample(&corpora.mono_f, settings.tune_sample, &mut rng);
    let loss_at_defaults = unsupervised_loss(&ef, &fe, &sample_e, &sample_f, &settings.tune)?;
    let tuned = alternating_tune(&ef, &fe, &sample_e, &sample_f, &settings.tune)?;
    let steps: Vec<_> = tuned.half_rounds.iter().flat_map(|h| h.mert.steps.iter()).collect();
    let loss_increasing_steps = steps.iter().filter(|s| s.loss_after > s.loss_before).count();
    let ef = ef.with_weights(tuned.weights_ef);
    let fe = fe.with_weights(tuned.weights_fe);
    lap("tune", &mut timings);
    let initial_bleu = held_out_bleu(&ef, &corpora.test_e, &corpora.test_f);

    let refined = refine_loop(
        &ef,
        &fe,
        &corpora.mono_e,
        &corpora.mono_f,
        (&sample_e, &sample_f),
        &settings.refine,
    )?;
    lap("refine", &mut timings);
    let refined_bleu = held_out_bleu(&refined.system_ef, &corpora.test_e, &corpora.test_f);
    let violations = membership_violations(&refined.system_ef.table, &corpora.mono_e, &corpora.mono_f).len()
        + membership_violations(&refined.system_fe.table, &corpora.mono_f, &corpora.mono_e).len();
    lap("evaluate", &mut timings);
    Ok(ExperimentReport {
        mapping_p_at_1,
        table_top1_accuracy,
        loss_at_defaults,
        loss_after_tuning: tuned.final_loss(),
        accepted_steps: steps.len(),
        loss_increasing_steps,
        initial_bleu,
        refined_bleu,
        refined_entries: refined.system_ef.table.len() + refined.system_fe.table.len(),
        membership_violations: violations,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CipherConfig {
        CipherConfig {
            sentences: 200,
            held_out: 10,
            vocab_size: 50,
            ..Default::default()
        }
    }

    #[test]
    fn cipher_is_a_bijection_with_fixed_anchors() {
        let c = generate_cipher_corpora(&small()).unwrap();
        let images: FxHashSet<&String> = c.cipher.values().collect();
        assert_eq!(images.len(), c.cipher.len());
        let anchors = anchors(small().numerals);
        for a in &anchors {
            assert_eq!(&c.cipher[a], a);
        }
        for (e, f) in &c.cipher {
            if !anchors.contains(e) {
                assert!(!c.cipher.contains_key(f), "{f} is also an E word");
            }
        }
        assert_eq!(c.test_f, c.test_e.iter().map(|s| c.encipher(s)).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cipher_corpora(&small()).unwrap();
        let b = generate_cipher_corpora(&small()).unwrap();
        assert_eq!(a.mono_e, b.mono_e);
        assert_eq!(a.mono_f, b.mono_f);
        assert_eq!(a.lexicon(20), b.lexicon(20));
    }

    #[test]
    fn sentence_lengths_respect_bounds() {
        let cfg = small();
        let c = generate_cipher_corpora(&cfg).unwrap();
        assert!(c
            .mono_e
            .iter()
            .chain(&c.mono_f)
            .all(|s| (cfg.min_len..=cfg.max_len).contains(&s.len())));
    }
}

//! Corpus ingestion: normalization, tokenization, truecasing and the
//! frequency-capped phrase inventory.
//!
//! The tokenizer implements a small fixed rule set:
//!
//! * typographic quotes, apostrophes, dashes, ellipses and unicode spaces are
//!   mapped to ASCII through a fixed table;
//! * runs of alphanumeric characters form words, every other character is a
//!   token of its own;
//! * a hyphen between two alphanumeric characters becomes the marker token
//!   `@-@` (aggressive hyphen splitting);
//! * `.` and `,` between two digits stay inside the number (`3.14`, `1,000`);
//! * an apostrophe between two letters starts a new token (`don't` becomes
//!   `don 't`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::phrase::{Phrase, Sentence};

pub const HYPHEN_MARKER: &str = "@-@";

fn normalize_char(c: char, out: &mut String) {
    match c {
        '\u{00A0}' | '\u{2000}'..='\u{200A}' | '\u{202F}' | '\u{205F}' | '\u{3000}' | '\t' => {
            out.push(' ')
        }
        '\u{200B}' | '\u{200C}' | '\u{200D}' | '\u{FEFF}' | '\u{00AD}' => {}
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{00AB}' | '\u{00BB}' | '\u{2033}' => {
            out.push('"')
        }
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' | '\u{00B4}' | '`' => {
            out.push('\'')
        }
        '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2212}' | '\u{FE63}' | '\u{FF0D}' => {
            out.push('-')
        }
        '\u{2014}' | '\u{2015}' => out.push_str(" - "),
        '\u{2026}' => out.push_str("..."),
        '\u{2039}' => out.push('<'),
        '\u{203A}' => out.push('>'),
        _ => out.push(c),
    }
}

/// Maps punctuation variants to their ASCII equivalents.
pub fn normalize_punctuation(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for c in raw.chars() {
        normalize_char(c, &mut out);
    }
    out
}

fn tokenize_chunk(chars: &[char], out: &mut Sentence) {
    let mut current = String::new();
    let flush = |current: &mut String, out: &mut Sentence| {
        if !current.is_empty() {
            out.push(std::mem::take(current));
        }
    };
    for i in 0..chars.len() {
        let c = chars[i];
        let prev = if i > 0 { Some(chars[i - 1]) } else { None };
        let next = chars.get(i + 1).copied();
        if c.is_alphanumeric() {
            current.push(c);
            continue;
        }
        let between = |pred: fn(&char) -> bool| prev.is_some_and(|p| pred(&p)) && next.is_some_and(|n| pred(&n));
        match c {
            '-' if between(|c| c.is_alphanumeric()) => {
                flush(&mut current, out);
                out.push(HYPHEN_MARKER.to_string());
            }
            '.' | ',' if between(|c| c.is_ascii_digit()) => current.push(c),
            '\'' if between(|c| c.is_alphabetic()) => {
                flush(&mut current, out);
                current.push(c);
            }
            _ => {
                flush(&mut current, out);
                out.push(c.to_string());
            }
        }
    }
    flush(&mut current, out);
}

/// Normalizes punctuation and splits a raw line into tokens.
pub fn normalize_and_tokenize(raw_line: &str) -> Sentence {
    let normalized = normalize_punctuation(raw_line);
    let mut tokens = Vec::new();
    for chunk in normalized.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        tokenize_chunk(&chars, &mut tokens);
    }
    tokens
}

/// Most frequent surface casing of each lowercased token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruecaseModel {
    best: FxHashMap<String, String>,
}

impl TruecaseModel {
    /// Counts every surface form, sentence-initial ones included. Ties go to
    /// the lexicographically smallest surface form.
    pub fn train<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut counts: FxHashMap<String, FxHashMap<String, u64>> = FxHashMap::default();
        for sentence in corpus {
            for token in sentence {
                *counts
                    .entry(token.to_lowercase())
                    .or_default()
                    .entry(token.clone())
                    .or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .map(|(lower, forms)| {
                let surface = forms
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                    .map(|(s, _)| s)
                    .unwrap_or_else(|| lower.clone());
                (lower, surface)
            })
            .collect();
        TruecaseModel { best }
    }

    pub fn casing_of(&self, token: &str) -> Option<&str> {
        self.best.get(&token.to_lowercase()).map(String::as_str)
    }

    /// Replaces the sentence-initial token by its most frequent casing.
    pub fn apply(&self, sentence: &Sentence) -> Sentence {
        let mut out = sentence.clone();
        if let Some(first) = out.first_mut() {
            if let Some(surface) = self.casing_of(first) {
                *first = surface.to_string();
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.best.len()
    }

    pub fn is_empty(&self) -> bool {
        self.best.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<_> = self.best.iter().collect();
        entries.sort();
        let mut w = create(path)?;
        for (lower, surface) in entries {
            writeln!(w, "{lower}\t{surface}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut best = FxHashMap::default();
        for (i, line) in read_lines(path)?.into_iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (lower, surface) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path.display().to_string(), i + 1, "expected lower<TAB>surface"))?;
            best.insert(lower.to_string(), surface.to_string());
        }
        Ok(TruecaseModel { best })
    }
}

pub fn train_truecaser(corpus: &[Sentence]) -> TruecaseModel {
    TruecaseModel::train(corpus)
}

pub fn apply_truecase(model: &TruecaseModel, sentence: &Sentence) -> Sentence {
    model.apply(sentence)
}

/// Per-order retention limits for the phrase inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InventoryCaps {
    pub unigrams: usize,
    pub bigrams: usize,
    pub trigrams: usize,
}

impl Default for InventoryCaps {
    fn default() -> Self {
        InventoryCaps {
            unigrams: 200_000,
            bigrams: 400_000,
            trigrams: 400_000,
        }
    }
}

impl InventoryCaps {
    pub fn new(unigrams: usize, bigrams: usize, trigrams: usize) -> Self {
        InventoryCaps {
            unigrams,
            bigrams,
            trigrams,
        }
    }

    fn for_order(&self, order: usize) -> usize {
        match order {
            1 => self.unigrams,
            2 => self.bigrams,
            3 => self.trigrams,
            _ => 0,
        }
    }
}

pub const MAX_PHRASE_ORDER: usize = 3;

/// Frequency-capped unigram, bigram and trigram phrases with exact counts.
///
/// Entries are kept sorted by descending count, ties broken by the phrase's
/// lexicographic order, across all orders.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhraseInventory {
    entries: Vec<(Phrase, u64)>,
    index: FxHashMap<Phrase, usize>,
}

fn frequency_order(a: &(Phrase, u64), b: &(Phrase, u64)) -> std::cmp::Ordering {
    b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl PhraseInventory {
    /// Builds an inventory from raw `(phrase, count)` pairs, sorting them.
    pub fn from_entries(mut entries: Vec<(Phrase, u64)>) -> Self {
        entries.sort_by(frequency_order);
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (p.clone(), i))
            .collect();
        PhraseInventory { entries, index }
    }

    pub fn count(&self, phrase: &Phrase) -> Option<u64> {
        self.index.get(phrase).map(|&i| self.entries[i].1)
    }

    pub fn contains(&self, phrase: &Phrase) -> bool {
        self.index.contains_key(phrase)
    }

    /// Entries in frequency order.
    pub fn entries(&self) -> &[(Phrase, u64)] {
        &self.entries
    }

    pub fn iter_order(&self, order: usize) -> impl Iterator<Item = &(Phrase, u64)> {
        self.entries.iter().filter(move |(p, _)| p.order() == order)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        for (p, c) in &self.entries {
            writeln!(w, "{p}\t{c}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in read_lines(path)?.into_iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (phrase, count) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(path.display().to_string(), i + 1, "expected phrase<TAB>count"))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::parse(path.display().to_string(), i + 1, "count is not an integer"))?;
            entries.push((Phrase::parse(phrase), count));
        }
        Ok(Self::from_entries(entries))
    }
}

/// Exact occurrence counts of every 1..=3-gram in a block of sentences.
pub fn count_ngrams(corpus: &[Sentence]) -> FxHashMap<Phrase, u64> {
    let count_block = |block: &[Sentence]| {
        let mut counts: FxHashMap<Phrase, u64> = FxHashMap::default();
        for sentence in block {
            for start in 0..sentence.len() {
                for len in 1..=MAX_PHRASE_ORDER.min(sentence.len() - start) {
                    *counts
                        .entry(Phrase::from_tokens(&sentence[start..start + len]))
                        .or_default() += 1;
                }
            }
        }
        counts
    };
    corpus
        .par_chunks(4096)
        .map(count_block)
        .reduce(FxHashMap::default, |mut a, b| {
            let (mut big, small) = if a.len() >= b.len() { (a, b) } else { (b, std::mem::take(&mut a)) };
            for (p, c) in small {
                *big.entry(p).or_default() += c;
            }
            big
        })
}

/// Counts all unigrams, bigrams and trigrams and keeps the most frequent of
/// each order up to its cap.
pub fn build_ngram_inventory(corpus: &[Sentence], caps: InventoryCaps) -> PhraseInventory {
    let counts = count_ngrams(corpus);
    let mut by_order: [Vec<(Phrase, u64)>; MAX_PHRASE_ORDER] = Default::default();
    for (p, c) in counts {
        let order = p.order();
        by_order[order - 1].push((p, c));
    }
    let mut kept = Vec::new();
    for (i, mut list) in by_order.into_iter().enumerate() {
        list.sort_by(frequency_order);
        list.truncate(caps.for_order(i + 1));
        kept.extend(list);
    }
    PhraseInventory::from_entries(kept)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// Reads an already tokenized corpus: one sentence per line, tokens separated
/// by whitespace.
pub fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn write_corpus(path: &Path, corpus: &[Sentence]) -> Result<()> {
    let mut w = create(path)?;
    for s in corpus {
        writeln!(w, "{}", s.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tokenizes raw text lines, trains a truecaser on the result and applies it.
pub fn prepare_corpus(raw_lines: &[String]) -> (Vec<Sentence>, TruecaseModel) {
    let tokenized: Vec<Sentence> = raw_lines.par_iter().map(|l| normalize_and_tokenize(l)).collect();
    let model = TruecaseModel::train(&tokenized);
    let cased = tokenized.par_iter().map(|s| model.apply(s)).collect();
    (cased, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Sentence {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenizes_punctuation() {
        assert_eq!(normalize_and_tokenize("Hello, world."), toks("Hello , world ."));
        assert!(normalize_and_tokenize("").is_empty());
        assert!(normalize_and_tokenize("   \t ").is_empty());
    }

    #[test]
    fn splits_hyphens_with_marker() {
        assert_eq!(normalize_and_tokenize("e-mail"), toks("e @-@ mail"));
        assert_eq!(normalize_and_tokenize("state-of-the-art"), toks("state @-@ of @-@ the @-@ art"));
        assert_eq!(normalize_and_tokenize("a - b"), toks("a - b"));
    }

    #[test]
    fn normalizes_unicode_variants() {
        assert_eq!(
            normalize_and_tokenize("\u{201C}Quote\u{201D}\u{00A0}it\u{2019}s 1\u{2013}2"),
            toks("\" Quote \" it 's 1 @-@ 2")
        );
        assert_eq!(normalize_and_tokenize("wait\u{2026}"), toks("wait . . ."));
        assert_eq!(normalize_and_tokenize("pi is 3.14, not 3,5."), toks("pi is 3.14 , not 3,5 ."));
    }

    #[test]
    fn truecaser_majority_casing() {
        let corpus = vec![toks("The cat"), toks("the cat"), toks("the dog")];
        let model = train_truecaser(&corpus);
        assert_eq!(apply_truecase(&model, &toks("The cat")), toks("the cat"));
        assert_eq!(apply_truecase(&model, &toks("Zzyzx cat")), toks("Zzyzx cat"));
        assert_eq!(apply_truecase(&model, &toks("the NASA")), toks("the NASA"));
    }

    #[test]
    fn truecase_model_file_roundtrip() {
        let corpus = vec![toks("The cat"), toks("the cat"), toks("Paris is big")];
        let model = train_truecaser(&corpus);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tc.txt");
        model.save(&path).unwrap();
        assert_eq!(TruecaseModel::load(&path).unwrap(), model);
    }

    fn inventory_map(inv: &PhraseInventory) -> Vec<(String, u64)> {
        let mut v: Vec<_> = inv.entries().iter().map(|(p, c)| (p.to_string(), *c)).collect();
        v.sort();
        v
    }

    #[test]
    fn inventory_counts_by_hand() {
        let corpus = vec![toks("a b a")];
        let inv = build_ngram_inventory(&corpus, InventoryCaps::new(10, 10, 10));
        let expected: Vec<(String, u64)> = vec![
            ("a".into(), 2),
            ("a b".into(), 1),
            ("a b a".into(), 1),
            ("b".into(), 1),
            ("b a".into(), 1),
        ];
        assert_eq!(inventory_map(&inv), expected);

        let capped = build_ngram_inventory(&corpus, InventoryCaps::new(1, 0, 0));
        assert_eq!(inventory_map(&capped), vec![("a".to_string(), 2)]);

        assert!(build_ngram_inventory(&[], InventoryCaps::default()).is_empty());
    }

    #[test]
    fn inventory_ties_break_lexicographically() {
        let corpus = vec![toks("c b a")];
        let inv = build_ngram_inventory(&corpus, InventoryCaps::new(2, 0, 0));
        assert_eq!(inventory_map(&inv), vec![("a".to_string(), 1), ("b".to_string(), 1)]);
    }

    #[test]
    fn inventory_file_roundtrip() {
        let corpus = vec![toks("x y z x y"), toks("y z")];
        let inv = build_ngram_inventory(&corpus, InventoryCaps::new(5, 5, 5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.tsv");
        inv.save(&path).unwrap();
        assert_eq!(PhraseInventory::load(&path).unwrap(), inv);
    }

    fn brute_force_counts(corpus: &[Sentence]) -> std::collections::BTreeMap<String, u64> {
        let mut m = std::collections::BTreeMap::new();
        for s in corpus {
            for n in 1..=3 {
                if s.len() < n {
                    continue;
                }
                for w in s.windows(n) {
                    *m.entry(w.join(" ")).or_insert(0) += 1;
                }
            }
        }
        m
    }

    fn small_corpus() -> impl Strategy<Value = Vec<Sentence>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..8)
                .prop_map(|v| v.into_iter().map(str::to_string).collect::<Sentence>()),
            0..30,
        )
    }

    proptest! {
        #[test]
        fn tokenization_is_deterministic_and_clean(s in "\\PC{0,40}") {
            let a = normalize_and_tokenize(&s);
            let b = normalize_and_tokenize(&s);
            prop_assert_eq!(&a, &b);
            for t in &a {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
        }

        #[test]
        fn inventory_matches_sliding_window_recount(corpus in small_corpus()) {
            let inv = build_ngram_inventory(&corpus, InventoryCaps::new(1000, 1000, 1000));
            let expected = brute_force_counts(&corpus);
            let got: std::collections::BTreeMap<String, u64> =
                inv.entries().iter().map(|(p, c)| (p.to_string(), *c)).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn truncation_keeps_most_frequent(corpus in small_corpus(), cap in 1usize..6) {
            let inv = build_ngram_inventory(&corpus, InventoryCaps::new(cap, cap, cap));
            let all = brute_force_counts(&corpus);
            for order in 1..=3 {
                let kept: Vec<u64> = inv.iter_order(order).map(|(_, c)| *c).collect();
                prop_assert!(kept.len() <= cap);
                let min_kept = kept.iter().copied().min();
                let max_dropped = all
                    .iter()
                    .filter(|(p, _)| p.split(' ').count() == order && !inv.contains(&Phrase::parse(p)))
                    .map(|(_, c)| *c)
                    .max();
                if let (Some(lo), Some(hi)) = (min_kept, max_dropped) {
                    prop_assert!(lo >= hi);
                }
            }
        }

        #[test]
        fn truecasing_is_idempotent(corpus in prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["The", "the", "A", "a", "NASA", "Cat", "cat"]), 1..6)
                .prop_map(|v| v.into_iter().map(str::to_string).collect::<Sentence>()),
            1..20,
        )) {
            let model = train_truecaser(&corpus);
            let once: Vec<Sentence> = corpus.iter().map(|s| model.apply(s)).collect();
            let retrained = train_truecaser(&once);
            let twice: Vec<Sentence> = once.iter().map(|s| retrained.apply(s)).collect();
            prop_assert_eq!(once, twice);
        }
    }
}

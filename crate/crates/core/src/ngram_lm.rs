//! Interpolated modified Kneser-Ney n-gram language models.
//!
//! Probabilities are stored as log10 values in backoff form, exactly as they
//! would appear in an ARPA file: each stored n-gram carries its interpolated
//! probability and, when it is a history, the mass `γ(h)` left for the lower
//! order.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::phrase::Sentence;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 2;
const MAX_ORDER: usize = 12;
/// log10 probability written for `<s>`, which is never predicted.
const BOS_LOGPROB: f64 = -99.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub order: usize,
    /// Lower bound on p(<unk>) before the unigram level is renormalized.
    pub unk_floor: f64,
    /// Use this discount for every count instead of estimating three.
    pub fixed_discount: Option<f64>,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            order: 5,
            unk_floor: 1e-7,
            fixed_discount: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    logp: f64,
    bow: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    order: usize,
    words: Vec<String>,
    ids: FxHashMap<String, u32>,
    /// `grams[n - 1]` holds the n-grams.
    grams: Vec<FxHashMap<Box<[u32]>, Entry>>,
    discounts: Vec<[f64; 3]>,
}

type Counts = FxHashMap<Box<[u32]>, u64>;

fn encode(sentence: &[String], ids: &FxHashMap<String, u32>) -> Vec<u32> {
    let mut out = Vec::with_capacity(sentence.len() + 2);
    out.push(BOS_ID);
    out.extend(sentence.iter().map(|t| ids[t.as_str()]));
    out.push(EOS_ID);
    out
}

fn count_orders(padded: &[Vec<u32>], order: usize) -> Vec<Counts> {
    let chunk = (padded.len() / (4 * rayon::current_num_threads()).max(1)).max(256);
    padded
        .par_chunks(chunk)
        .fold(
            || vec![Counts::default(); order],
            |mut acc, sentences| {
                for s in sentences {
                    for n in 1..=order {
                        for w in s.windows(n) {
                            *acc[n - 1].entry(w.into()).or_insert(0) += 1;
                        }
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![Counts::default(); order],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    if x.len() < y.len() {
                        let mut y = y;
                        for (k, v) in x.drain() {
                            *y.entry(k).or_insert(0) += v;
                        }
                        *x = y;
                    } else {
                        for (k, v) in y {
                            *x.entry(k).or_insert(0) += v;
                        }
                    }
                }
                a
            },
        )
}

/// Modified KN discounts from count-of-counts, or `None` when they cannot be
/// estimated.
fn estimate_discounts<'a>(counts: impl Iterator<Item = &'a u64>) -> Option<[f64; 3]> {
    let mut t = [0u64; 4];
    for &c in counts {
        if (1..=4).contains(&c) {
            t[c as usize - 1] += 1;
        }
    }
    if t.contains(&0) {
        return None;
    }
    let [t1, t2, t3, t4] = t.map(|x| x as f64);
    let y = t1 / (t1 + 2.0 * t2);
    let d = [1.0 - 2.0 * y * t2 / t1, 2.0 - 3.0 * y * t3 / t2, 3.0 - 4.0 * y * t4 / t3];
    let ok = d.iter().enumerate().all(|(i, &v)| v > 0.0 && v < (i + 1) as f64);
    ok.then_some(d)
}

fn discount(d: &[f64; 3], count: u64) -> f64 {
    match count {
        0 => 0.0,
        1 => d[0],
        2 => d[1],
        _ => d[2],
    }
}

pub fn train_kn_lm(corpus: &[Sentence], order: usize) -> Result<LanguageModel> {
    LanguageModel::train(
        corpus,
        &LmConfig {
            order,
            ..Default::default()
        },
    )
}

impl LanguageModel {
    pub fn train(corpus: &[Sentence], config: &LmConfig) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyInput("language model corpus".into()));
        }
        if config.order == 0 || config.order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!(
                "language model order must be in 1..={MAX_ORDER}, got {}",
                config.order
            )));
        }
        if !(config.unk_floor > 0.0 && config.unk_floor < 1.0) {
            return Err(Error::InvalidArgument("unk floor must be in (0, 1)".into()));
        }
        let mut words: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
        let mut ids: FxHashMap<String, u32> = words.iter().cloned().zip(0..).collect();
        let mut distinct: Vec<&str> = corpus.iter().flatten().map(String::as_str).collect();
        distinct.sort_unstable();
        distinct.dedup();
        for w in distinct {
            if !ids.contains_key(w) {
                ids.insert(w.to_string(), words.len() as u32);
                words.push(w.to_string());
            }
        }
        let padded: Vec<Vec<u32>> = corpus.iter().map(|s| encode(s, &ids)).collect();

        let longest = padded.iter().map(Vec::len).max().unwrap_or(0);
        let order = if longest < config.order {
            log::warn!(
                "corpus too short for a {}-gram model, reducing order to {longest}",
                config.order
            );
            longest
        } else {
            config.order
        };

        let raw = count_orders(&padded, order);
        // Adjusted counts: raw at the top order and for n-grams opening with
        // <s>, number of distinct left extensions otherwise.
        let mut adjusted: Vec<Counts> = Vec::with_capacity(order);
        for n in 1..=order {
            if n == order {
                adjusted.push(raw[n - 1].clone());
                continue;
            }
            let mut a: Counts = raw[n - 1]
                .iter()
                .filter(|(g, _)| g[0] == BOS_ID)
                .map(|(g, c)| (g.clone(), *c))
                .collect();
            for g in raw[n].keys() {
                *a.entry(g[1..].into()).or_insert(0) += 1;
            }
            adjusted.push(a);
        }
        // The <s> unigram is context only.
        adjusted[0].remove(&[BOS_ID][..]);

        let mut discounts = Vec::with_capacity(order);
        for (n, a) in adjusted.iter().enumerate() {
            let d = match config.fixed_discount {
                Some(d) => [d; 3],
                None => estimate_discounts(a.values()).unwrap_or_else(|| {
                    log::debug!("degenerate count-of-counts at order {}, using D=0.75", n + 1);
                    [0.75; 3]
                }),
            };
            discounts.push(d);
        }

        // Per-history totals and discounted mass.
        let mut gamma: Vec<FxHashMap<Box<[u32]>, f64>> = Vec::with_capacity(order);
        let mut totals: Vec<FxHashMap<Box<[u32]>, u64>> = Vec::with_capacity(order);
        for (n, a) in adjusted.iter().enumerate() {
            let mut sum: FxHashMap<Box<[u32]>, (u64, f64)> = FxHashMap::default();
            for (g, &c) in a {
                let e = sum.entry(g[..n].into()).or_insert((0, 0.0));
                e.0 += c;
                e.1 += discount(&discounts[n], c);
            }
            totals.push(sum.iter().map(|(h, v)| (h.clone(), v.0)).collect());
            gamma.push(sum.into_iter().map(|(h, (t, m))| (h, m / t as f64)).collect());
        }

        // Unigrams interpolate with the uniform distribution over the
        // predictable vocabulary (everything but <s>).
        let vocab = (words.len() - 1) as f64;
        let g0 = gamma[0].get(&[][..]).copied().unwrap_or(1.0);
        let t0 = totals[0].get(&[][..]).copied().unwrap_or(0) as f64;
        let mut uni = vec![0.0; words.len()];
        for (id, p) in uni.iter_mut().enumerate().skip(1) {
            let c = adjusted[0].get(&[id as u32][..]).copied().unwrap_or(0);
            let u = if c > 0 { (c as f64 - discount(&discounts[0], c)) / t0 } else { 0.0 };
            *p = u + g0 / vocab;
        }
        if uni[UNK_ID as usize] < config.unk_floor {
            uni[UNK_ID as usize] = config.unk_floor;
            let z: f64 = uni.iter().sum();
            uni.iter_mut().for_each(|p| *p /= z);
        }

        let mut grams: Vec<FxHashMap<Box<[u32]>, Entry>> = vec![FxHashMap::default(); order];
        for (id, &p) in uni.iter().enumerate() {
            let logp = if id == BOS_ID as usize { BOS_LOGPROB } else { p.log10() };
            grams[0].insert(vec![id as u32].into(), Entry { logp, bow: None });
        }
        let mut model = LanguageModel {
            order,
            words,
            ids,
            grams,
            discounts,
        };
        for n in 2..=order {
            let mut level = FxHashMap::default();
            for (g, &c) in &adjusted[n - 1] {
                let h = &g[..n - 1];
                let t = totals[n - 1][h] as f64;
                let lower = 10f64.powf(model.log10_prob(&g[1..n - 1], g[n - 1]));
                let p = (c as f64 - discount(&model.discounts[n - 1], c)) / t + gamma[n - 1][h] * lower;
                level.insert(g.clone(), Entry { logp: p.log10(), bow: None });
            }
            model.grams[n - 1] = level;
            // Histories of order n-1 receive their backoff weights only now,
            // so lower-order lookups above never see them.
            for (h, &gm) in &gamma[n - 1] {
                if let Some(e) = model.grams[n - 2].get_mut(h) {
                    e.bow = Some(gm.log10());
                }
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Discounts `[D1, D2, D3+]` per order; empty for models read from ARPA.
    pub fn discounts(&self) -> &[[f64; 3]] {
        &self.discounts
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn bos(&self) -> u32 {
        BOS_ID
    }

    pub fn eos(&self) -> u32 {
        EOS_ID
    }

    pub fn unk(&self) -> u32 {
        UNK_ID
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Every word the model can predict, including `</s>` and `<unk>`.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.words.iter().skip(1).map(String::as_str)
    }

    pub fn num_ngrams(&self, n: usize) -> usize {
        self.grams.get(n.wrapping_sub(1)).map_or(0, FxHashMap::len)
    }

    /// Drops leading context ids that cannot affect any later probability:
    /// a history that is not itself a stored n-gram has no extensions and
    /// no backoff weight.
    pub fn trim_context(&self, context: &mut Vec<u32>) {
        let mut drop = context.len().saturating_sub(self.order - 1);
        while drop < context.len() {
            let h = &context[drop..];
            if self.grams[h.len() - 1].contains_key(h) {
                break;
            }
            drop += 1;
        }
        context.drain(..drop);
    }

    /// log10 p(word | context) with backoff. Only the last `order − 1`
    /// context ids are consulted.
    pub fn log10_prob(&self, context: &[u32], word: u32) -> f64 {
        let keep = context.len().min(self.order - 1);
        let ctx = &context[context.len() - keep..];
        let mut key = [0u32; MAX_ORDER];
        let mut backoff = 0.0;
        for start in 0..=keep {
            let len = keep - start;
            key[..len].copy_from_slice(&ctx[start..]);
            key[len] = word;
            if let Some(e) = self.grams[len].get(&key[..=len]) {
                return e.logp + backoff;
            }
            if len > 0 {
                if let Some(Entry { bow: Some(b), .. }) = self.grams[len - 1].get(&ctx[start..]) {
                    backoff += b;
                }
            }
        }
        // Word ids outside the table fall back to <unk>.
        self.grams[0][&[UNK_ID][..]].logp + backoff
    }

    /// Natural-log probability, the unit used by decoder features.
    pub fn ln_prob(&self, context: &[u32], word: u32) -> f64 {
        self.log10_prob(context, word) * std::f64::consts::LN_10
    }

    /// log10 probability of `<s> sentence </s>`.
    pub fn lm_logprob<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        let mut ctx = vec![BOS_ID];
        let mut total = 0.0;
        for w in sentence.iter().map(|t| self.id(t.as_ref())).chain([EOS_ID]) {
            total += self.log10_prob(&ctx, w);
            ctx.push(w);
        }
        total
    }

    /// Bits per token over the corpus, counting one end marker per sentence.
    pub fn per_word_entropy<S: AsRef<str>>(&self, corpus: &[Vec<S>]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("entropy corpus".into()));
        }
        let tokens: usize = corpus.iter().map(|s| s.len() + 1).sum();
        let log10_sum: f64 = corpus.iter().map(|s| self.lm_logprob(s)).sum();
        Ok(-log10_sum * std::f64::consts::LOG2_10 / tokens as f64)
    }

    pub fn write_arpa<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w)?;
        writeln!(w, "\\data\\")?;
        for (n, level) in self.grams.iter().enumerate() {
            writeln!(w, "ngram {}={}", n + 1, level.len())?;
        }
        for (n, level) in self.grams.iter().enumerate() {
            writeln!(w)?;
            writeln!(w, "\\{}-grams:", n + 1)?;
            let mut rows: Vec<(String, &Entry)> = level
                .iter()
                .map(|(g, e)| {
                    let text: Vec<&str> = g.iter().map(|&id| self.word(id)).collect();
                    (text.join(" "), e)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (text, e) in rows {
                match e.bow {
                    Some(b) => writeln!(w, "{}\t{}\t{}", e.logp, text, b)?,
                    None => writeln!(w, "{}\t{}", e.logp, text)?,
                }
            }
        }
        writeln!(w)?;
        writeln!(w, "\\end\\")?;
        Ok(())
    }

    pub fn save_arpa(&self, path: &Path) -> Result<()> {
        let mut w = crate::corpus::create(path)?;
        self.write_arpa(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_arpa<R: BufRead>(reader: R) -> Result<Self> {
        let what = "ARPA model";
        let mut declared: Vec<usize> = Vec::new();
        let mut words: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
        let mut ids: FxHashMap<String, u32> = words.iter().cloned().zip(0..).collect();
        let mut grams: Vec<FxHashMap<Box<[u32]>, Entry>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut ended = false;
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::parse(what, lineno, e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                in_data = true;
                continue;
            }
            if line == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix('\\').and_then(|l| l.strip_suffix("-grams:")) {
                let n: usize = rest
                    .parse()
                    .map_err(|_| Error::parse(what, lineno, format!("bad section header `{line}`")))?;
                if n == 0 || n > declared.len() {
                    return Err(Error::parse(what, lineno, format!("undeclared section {n}")));
                }
                while grams.len() < n {
                    grams.push(FxHashMap::default());
                }
                section = Some(n);
                in_data = false;
                continue;
            }
            if in_data {
                let spec = line
                    .strip_prefix("ngram ")
                    .and_then(|s| s.split_once('='))
                    .ok_or_else(|| Error::parse(what, lineno, format!("bad count line `{line}`")))?;
                let n: usize = spec.0.trim().parse().map_err(|_| Error::parse(what, lineno, "bad order"))?;
                let c: usize = spec.1.trim().parse().map_err(|_| Error::parse(what, lineno, "bad count"))?;
                if n != declared.len() + 1 {
                    return Err(Error::parse(what, lineno, "n-gram counts out of order"));
                }
                declared.push(c);
                continue;
            }
            let n = section.ok_or_else(|| Error::parse(what, lineno, "entry outside a section"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(Error::parse(what, lineno, format!("expected {n} tokens")));
            }
            let (logp, tokens, bow) = (fields[0], &fields[1..=n], fields.get(n + 1).copied());
            let parse_f = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(what, lineno, format!("bad number `{s}`")))
            };
            let entry = Entry {
                logp: parse_f(logp)?,
                bow: bow.map(parse_f).transpose()?,
            };
            let mut key = Vec::with_capacity(n);
            for &t in tokens {
                let id = match ids.get(t) {
                    Some(&id) => id,
                    None => {
                        let id = words.len() as u32;
                        ids.insert(t.to_string(), id);
                        words.push(t.to_string());
                        id
                    }
                };
                key.push(id);
            }
            grams[n - 1].insert(key.into(), entry);
        }
        if !ended {
            return Err(Error::parse(what, 0, "missing \\end\\ marker"));
        }
        if grams.is_empty() || grams.len() != declared.len() {
            return Err(Error::parse(what, 0, "missing n-gram sections"));
        }
        for (n, (level, &c)) in grams.iter().zip(&declared).enumerate() {
            if level.len() != c {
                return Err(Error::parse(
                    what,
                    0,
                    format!("{}-gram section has {} entries, header says {c}", n + 1, level.len()),
                ));
            }
        }
        for special in [BOS_ID, EOS_ID, UNK_ID] {
            grams[0].entry(vec![special].into()).or_insert(Entry {
                logp: if special == BOS_ID { BOS_LOGPROB } else { 1e-7f64.log10() },
                bow: None,
            });
        }
        Ok(LanguageModel {
            order: grams.len(),
            words,
            ids,
            grams,
            discounts: Vec::new(),
        })
    }

    pub fn load_arpa(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_arpa(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Sentence> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    fn p(model: &LanguageModel, history: &[&str], w: &str) -> f64 {
        let ctx: Vec<u32> = history.iter().map(|h| model.id(h)).collect();
        10f64.powf(model.log10_prob(&ctx, model.id(w)))
    }

    #[test]
    fn unigram_hand_example() {
        let m = train_kn_lm(&corpus(&["a a a b"]), 1).unwrap();
        // counts a:3 b:1 </s>:1 (total 5), degenerate discounts so D = 0.75,
        // leftover 0.45 spread over {a, b, </s>, <unk>}
        assert!((p(&m, &[], "a") - 0.5625).abs() < 1e-12);
        assert!((p(&m, &[], "b") - 0.1625).abs() < 1e-12);
        assert!((p(&m, &[], EOS) - 0.1625).abs() < 1e-12);
        assert!((p(&m, &[], "zzz") - 0.1125).abs() < 1e-12);
        let sum: f64 = m.vocabulary().map(|w| p(&m, &[], w)).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bigram_hand_example() {
        let config = LmConfig {
            order: 2,
            fixed_discount: Some(0.5),
            ..Default::default()
        };
        let m = LanguageModel::train(&corpus(&["a b", "b a", "a"]), &config).unwrap();
        // continuation counts a=2 b=2 </s>=2; γ=0.25 over 4 words
        for w in ["a", "b", EOS] {
            assert!((p(&m, &[], w) - 0.3125).abs() < 1e-12);
        }
        assert!((p(&m, &[], UNK) - 0.0625).abs() < 1e-12);
        // after <s>: a:2 b:1, γ = 1/3
        assert!((p(&m, &[BOS], "a") - (1.5 / 3.0 + 0.3125 / 3.0)).abs() < 1e-12);
        assert!((p(&m, &[BOS], "b") - (0.5 / 3.0 + 0.3125 / 3.0)).abs() < 1e-12);
        assert!((p(&m, &[BOS], EOS) - 0.3125 / 3.0).abs() < 1e-12);
        // after b: </s>:1 a:1, γ = 1/2
        assert!((p(&m, &["b"], EOS) - 0.40625).abs() < 1e-12);
        assert!((p(&m, &["b"], "b") - 0.15625).abs() < 1e-12);
        let expected = (0.6041666666666666f64 * 0.2708333333333333 * 0.40625).log10();
        assert!((m.lm_logprob(&["a", "b"]) - expected).abs() < 1e-12);
    }

    #[test]
    fn distinct_words_have_uniform_continuations() {
        let config = LmConfig {
            order: 2,
            fixed_discount: Some(0.5),
            ..Default::default()
        };
        let m = LanguageModel::train(&corpus(&["a b c d e"]), &config).unwrap();
        let base = p(&m, &[], "a");
        for w in ["b", "c", "d", "e", EOS] {
            assert!((p(&m, &[], w) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_sentence_is_finite() {
        let m = train_kn_lm(&corpus(&["a b c", "c b a"]), 3).unwrap();
        let lp = m.lm_logprob(&["never-seen"]);
        assert!(lp.is_finite() && lp < 0.0);
    }

    #[test]
    fn order_reduces_for_short_data() {
        let m = train_kn_lm(&corpus(&["a"]), 5).unwrap();
        assert_eq!(m.order(), 3);
    }

    #[test]
    fn entropy_of_single_sentence() {
        let m = train_kn_lm(&corpus(&["a a a b"]), 1).unwrap();
        let h = m.per_word_entropy(&corpus(&["a"])).unwrap();
        let expected = -(0.5625f64.log2() + 0.1625f64.log2()) / 2.0;
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn arpa_round_trip_is_exact() {
        let m = train_kn_lm(&corpus(&["a b c a b", "b c d", "a a b c d e"]), 3).unwrap();
        let mut buf = Vec::new();
        m.write_arpa(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\\data\\") && text.contains("\\3-grams:") && text.contains("\\end\\"));
        let back = LanguageModel::read_arpa(&buf[..]).unwrap();
        for s in [&["a", "b"][..], &["e", "d", "q"], &[]] {
            assert_eq!(m.lm_logprob(s), back.lm_logprob(s));
        }
    }

    #[test]
    fn malformed_arpa_is_rejected() {
        assert!(LanguageModel::read_arpa(&b"\\data\\\nngram 1=2\n\n\\1-grams:\n-1\ta\n\\end\\\n"[..]).is_err());
        assert!(LanguageModel::read_arpa(&b"garbage"[..]).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_kn_lm(&[], 3).is_err());
    }
}

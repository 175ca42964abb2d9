//! Tokenized BLEU with sufficient statistics.

use std::ops::{Add, AddAssign};

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram matches and hypothesis n-gram totals for orders 1..=4,
/// plus lengths. Additive over sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    None,
    /// Add one to matches and totals for orders two and up.
    PlusOneHigherOrders,
}

impl Add for BleuStats {
    type Output = BleuStats;

    fn add(mut self, rhs: BleuStats) -> BleuStats {
        self += rhs;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += rhs.matches[n];
            self.totals[n] += rhs.totals[n];
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
    }
}

impl std::iter::Sum for BleuStats {
    fn sum<I: Iterator<Item = BleuStats>>(iter: I) -> Self {
        iter.fold(BleuStats::default(), |a, b| a + b)
    }
}

impl BleuStats {
    /// Subtracts `rhs`, as used when a hypothesis is swapped out of a total.
    pub fn sub_assign(&mut self, rhs: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] -= rhs.matches[n];
            self.totals[n] -= rhs.totals[n];
        }
        self.hyp_len -= rhs.hyp_len;
        self.ref_len -= rhs.ref_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp()
    }

    pub fn precision(&self, n: usize, smoothing: Smoothing) -> f64 {
        let add = match smoothing {
            Smoothing::PlusOneHigherOrders if n > 0 => 1.0,
            _ => 0.0,
        };
        let total = self.totals[n] as f64 + add;
        if total == 0.0 {
            0.0
        } else {
            (self.matches[n] as f64 + add) / total
        }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> FxHashMap<Vec<&str>, u64> {
    let mut counts = FxHashMap::default();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_stats<S: AsRef<str>, T: AsRef<str>>(hypothesis: &[S], reference: &[T]) -> BleuStats {
    let mut stats = BleuStats {
        hyp_len: hypothesis.len() as u64,
        ref_len: reference.len() as u64,
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let reference = ngram_counts(reference, n);
        stats.totals[n - 1] = hypothesis.len().saturating_sub(n - 1) as u64;
        stats.matches[n - 1] = hyp
            .iter()
            .map(|(g, c)| (*c).min(reference.get(g).copied().unwrap_or(0)))
            .sum();
    }
    stats
}

pub fn corpus_bleu(stats: &BleuStats, smoothing: Smoothing) -> Result<f64> {
    if stats.hyp_len == 0 {
        return Err(Error::InvalidArgument("BLEU of an empty hypothesis".into()));
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let p = stats.precision(n, smoothing);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    Ok((log_sum / MAX_ORDER as f64).exp() * stats.brevity_penalty())
}

/// BLEU over parallel hypothesis and reference lists.
pub fn corpus_bleu_of<S: AsRef<str>, T: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<T>],
    smoothing: Smoothing,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let total: BleuStats = hypotheses.iter().zip(references).map(|(h, r)| bleu_stats(h, r)).sum();
    corpus_bleu(&total, smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_sentences_match_everything() {
        let s = toks("a b c d e");
        let st = bleu_stats(&s, &s);
        assert_eq!(st.matches, [5, 4, 3, 2]);
        assert_eq!(st.totals, [5, 4, 3, 2]);
        assert_eq!((st.hyp_len, st.ref_len), (5, 5));
        assert_eq!(corpus_bleu(&st, Smoothing::None).unwrap(), 1.0);
    }

    #[test]
    fn clipping() {
        let st = bleu_stats(&toks("a a"), &toks("a"));
        assert_eq!(st.matches[0], 1);
        assert_eq!(st.totals[0], 2);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let st = bleu_stats(&toks("a b c d"), &toks("e f g h"));
        assert_eq!(st.matches, [0; 4]);
        assert_eq!(corpus_bleu(&st, Smoothing::None).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_example() {
        let st = bleu_stats(&toks("a b c d"), &toks("a b c d e"));
        let expected = (1.0f64 - 5.0 / 4.0).exp();
        assert!((corpus_bleu(&st, Smoothing::None).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn smoothing_spares_unigrams() {
        let st = bleu_stats(&toks("x y"), &toks("a b"));
        assert_eq!(corpus_bleu(&st, Smoothing::PlusOneHigherOrders).unwrap(), 0.0);
        let st = bleu_stats(&toks("a b"), &toks("a c"));
        let got = corpus_bleu(&st, Smoothing::PlusOneHigherOrders).unwrap();
        let expected = (0.5f64 * 0.5 * 1.0 * 1.0).powf(0.25);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_hypothesis_is_an_error() {
        let st = bleu_stats::<&str, &str>(&[], &toks("a"));
        assert!(corpus_bleu(&st, Smoothing::None).is_err());
    }
}

//! The initial phrase table, induced from a shared cross-lingual space.
//!
//! Every source phrase receives its nearest target phrases as candidates,
//! scored with a temperature softmax over cosines. The temperature of each
//! direction is fit by maximum likelihood on the dictionary induced in the
//! opposite direction.

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::crossmap::{top_k_by, UnitRows};
use crate::embeddings::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::phrase::Phrase;
use crate::phrase_table::{PhraseScores, PhraseTable, PhraseTableEntry};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
/// Score used for word pairs missing from a word translation table.
pub const LEX_FLOOR: f64 = 1e-10;
pub const DEFAULT_EPSILON: f64 = 0.3;

/// Ranked candidates per query: `(key row, cosine)`, best first, ties broken
/// by key phrase.
fn candidate_lists(
    queries: &UnitRows,
    keys: &UnitRows,
    key_phrases: &[&Phrase],
    k: usize,
) -> Vec<Vec<(usize, f64)>> {
    queries.map_scores(keys, |_, scores| top_k_by(scores, k, |j| key_phrases[j]))
}

/// The `k` target phrases closest to `source` by cosine.
pub fn translation_candidates(
    source: &Phrase,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    k: usize,
) -> Result<Vec<(Phrase, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let row = src
        .index_of(source)
        .ok_or_else(|| Error::UnknownPhrase(source.to_string()))?;
    let queries = UnitRows::new(src, &[row]);
    let all: Vec<usize> = (0..tgt.len()).collect();
    let keys = UnitRows::new(tgt, &all);
    let phrases: Vec<&Phrase> = tgt.phrases().iter().collect();
    let list = candidate_lists(&queries, &keys, &phrases, k).pop().unwrap_or_default();
    Ok(list.into_iter().map(|(j, c)| (tgt.phrase(j).clone(), c)).collect())
}

pub fn softmax_scores(cosines: &[f64], tau: f64) -> Vec<f64> {
    let max = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cosines.iter().map(|c| ((c - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// One observation for temperature fitting: a candidate set and the index of
/// the candidate the dictionary pairs with the query.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureInstance {
    pub cosines: Vec<f64>,
    pub gold: usize,
}

/// Σ log softmax(cosines / τ)[gold].
pub fn temperature_log_likelihood(instances: &[TemperatureInstance], tau: f64) -> f64 {
    instances
        .iter()
        .map(|inst| {
            let max = inst.cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = inst.cosines.iter().map(|c| ((c - max) / tau).exp()).sum::<f64>().ln() + max / tau;
            inst.cosines[inst.gold] / tau - lse
        })
        .sum()
}

/// Maximum-likelihood temperature by golden-section search over
/// `[TAU_MIN, TAU_MAX]`.
pub fn estimate_temperature_from(instances: &[TemperatureInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyInput("no dictionary pair found among the candidates".into()));
    }
    if instances.iter().all(|i| i.cosines.len() < 2) {
        return Err(Error::Unidentifiable(
            "every candidate set has a single candidate, the likelihood does not depend on τ".into(),
        ));
    }
    let f = |tau: f64| temperature_log_likelihood(instances, tau);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TAU_MIN, TAU_MAX);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-4 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let mid = (a + b) / 2.0;
    let best = [(mid, f(mid)), (TAU_MIN, f(TAU_MIN)), (TAU_MAX, f(TAU_MAX))]
        .into_iter()
        .fold((mid, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    Ok(best.0)
}

/// Temperature for scoring `p(target | source)`. `reverse_dictionary` pairs
/// come from target-to-source induction, and `candidates` holds the forward
/// candidate set of each source phrase. Pairs whose target is not among the
/// source's candidates are dropped.
pub fn estimate_temperature(
    reverse_dictionary: &[(Phrase, Phrase)],
    candidates: &FxHashMap<Phrase, Vec<(Phrase, f64)>>,
) -> Result<f64> {
    let instances: Vec<TemperatureInstance> = reverse_dictionary
        .iter()
        .filter_map(|(s, t)| {
            let cands = candidates.get(s)?;
            let gold = cands.iter().position(|(c, _)| c == t)?;
            Some(TemperatureInstance {
                cosines: cands.iter().map(|c| c.1).collect(),
                gold,
            })
        })
        .collect();
    estimate_temperature_from(&instances)
}

/// Word translation probabilities `p(word | given)`.
#[derive(Debug, Clone, Default)]
pub struct WordTranslationTable {
    probs: FxHashMap<String, FxHashMap<String, f64>>,
}

impl WordTranslationTable {
    pub fn insert(&mut self, given: &str, word: &str, p: f64) {
        self.probs
            .entry(given.to_string())
            .or_default()
            .insert(word.to_string(), p);
    }

    pub fn prob(&self, given: &str, word: &str) -> Option<f64> {
        self.probs.get(given)?.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.probs.values().map(FxHashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `(lex_fwd, lex_bwd)`: for every target word the best `p(t|s)` over source
/// words, multiplied, and symmetrically for source words. Missing pairs score
/// `LEX_FLOOR`.
pub fn lexical_weighting(
    source: &Phrase,
    target: &Phrase,
    fwd: &WordTranslationTable,
    bwd: &WordTranslationTable,
) -> (f64, f64) {
    let one_side = |given: &Phrase, produced: &Phrase, table: &WordTranslationTable| -> f64 {
        produced
            .tokens()
            .map(|w| {
                given
                    .tokens()
                    .filter_map(|g| table.prob(g, w))
                    .fold(LEX_FLOOR, f64::max)
            })
            .product()
    };
    (one_side(source, target, fwd), one_side(target, source, bwd))
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev(a, b) / max(|a|, |b|)` over characters.
pub fn similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// `(char_fwd, char_bwd)`: for every target word its best similarity to a
/// source word, floored at `epsilon`, multiplied; symmetric backwards.
pub fn subword_score(source: &Phrase, target: &Phrase, epsilon: f64) -> (f64, f64) {
    let one_side = |from: &Phrase, to: &Phrase| -> f64 {
        to.tokens()
            .map(|w| from.tokens().map(|f| similarity(f, w)).fold(epsilon, f64::max))
            .product()
    };
    (one_side(source, target), one_side(target, source))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InductionConfig {
    /// Candidates per source phrase.
    pub k: usize,
    pub epsilon: f64,
    /// Only the most frequent phrases of each side are considered.
    pub max_phrases: usize,
}

impl Default for InductionConfig {
    fn default() -> Self {
        InductionConfig {
            k: 100,
            epsilon: DEFAULT_EPSILON,
            max_phrases: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InducedTable {
    pub table: PhraseTable,
    pub tau_fwd: f64,
    pub tau_bwd: f64,
    pub word_fwd: WordTranslationTable,
    pub word_bwd: WordTranslationTable,
}

/// Candidate sets in both directions over the given row subsets.
struct Bidirectional {
    src_rows: Vec<usize>,
    tgt_rows: Vec<usize>,
    src_unit: UnitRows,
    tgt_unit: UnitRows,
    fwd: Vec<Vec<(usize, f64)>>,
    bwd: Vec<Vec<(usize, f64)>>,
    tau_fwd: f64,
    tau_bwd: f64,
}

impl Bidirectional {
    fn new(src: &EmbeddingSpace, tgt: &EmbeddingSpace, src_rows: Vec<usize>, tgt_rows: Vec<usize>, k: usize) -> Result<Self> {
        if src_rows.is_empty() || tgt_rows.is_empty() {
            return Err(Error::EmptyInput("phrase induction needs phrases on both sides".into()));
        }
        let src_unit = UnitRows::new(src, &src_rows);
        let tgt_unit = UnitRows::new(tgt, &tgt_rows);
        let src_phrases: Vec<&Phrase> = src_rows.iter().map(|&r| src.phrase(r)).collect();
        let tgt_phrases: Vec<&Phrase> = tgt_rows.iter().map(|&r| tgt.phrase(r)).collect();
        let fwd = candidate_lists(&src_unit, &tgt_unit, &tgt_phrases, k);
        let bwd = candidate_lists(&tgt_unit, &src_unit, &src_phrases, k);
        let tau_fwd = estimate_temperature_from(&reverse_instances(&fwd, &bwd))?;
        let tau_bwd = estimate_temperature_from(&reverse_instances(&bwd, &fwd))?;
        Ok(Bidirectional {
            src_rows,
            tgt_rows,
            src_unit,
            tgt_unit,
            fwd,
            bwd,
            tau_fwd,
            tau_bwd,
        })
    }

    /// `p(source i | target j)` under the backward softmax; computed over
    /// the backward candidate set of `j` even when `i` falls outside it.
    fn backward_prob(&self, i: usize, j: usize) -> f64 {
        let cands = &self.bwd[j];
        let cosines: Vec<f64> = cands.iter().map(|c| c.1).collect();
        if let Some(pos) = cands.iter().position(|c| c.0 == i) {
            return softmax_scores(&cosines, self.tau_bwd)[pos];
        }
        let cos: f64 = self
            .src_unit
            .row(i)
            .iter()
            .zip(self.tgt_unit.row(j))
            .map(|(a, b)| a * b)
            .sum();
        let max = cosines.iter().copied().fold(cos, f64::max);
        let z: f64 = cosines.iter().map(|c| ((c - max) / self.tau_bwd).exp()).sum();
        (((cos - max) / self.tau_bwd).exp() / z).clamp(LEX_FLOOR, 1.0)
    }
}

/// Instances for the temperature of `forward`: each key's best reverse match
/// forms a dictionary pair scored against the forward candidates.
fn reverse_instances(forward: &[Vec<(usize, f64)>], reverse: &[Vec<(usize, f64)>]) -> Vec<TemperatureInstance> {
    reverse
        .iter()
        .enumerate()
        .filter_map(|(key, cands)| {
            let query = cands.first()?.0;
            let set = &forward[query];
            let gold = set.iter().position(|c| c.0 == key)?;
            Some(TemperatureInstance {
                cosines: set.iter().map(|c| c.1).collect(),
                gold,
            })
        })
        .collect()
}

fn word_tables(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    config: &InductionConfig,
) -> Result<(WordTranslationTable, WordTranslationTable)> {
    let unigrams = |space: &EmbeddingSpace| -> Vec<usize> {
        (0..space.len())
            .filter(|&i| space.phrase(i).order() == 1)
            .take(config.max_phrases)
            .collect()
    };
    let bi = Bidirectional::new(src, tgt, unigrams(src), unigrams(tgt), config.k)?;
    let mut fwd = WordTranslationTable::default();
    let mut bwd = WordTranslationTable::default();
    for (q, cands) in bi.fwd.iter().enumerate() {
        let cosines: Vec<f64> = cands.iter().map(|c| c.1).collect();
        for ((j, _), p) in cands.iter().zip(softmax_scores(&cosines, bi.tau_fwd)) {
            fwd.insert(src.phrase(bi.src_rows[q]).as_str(), tgt.phrase(bi.tgt_rows[*j]).as_str(), p);
        }
    }
    for (q, cands) in bi.bwd.iter().enumerate() {
        let cosines: Vec<f64> = cands.iter().map(|c| c.1).collect();
        for ((i, _), p) in cands.iter().zip(softmax_scores(&cosines, bi.tau_bwd)) {
            bwd.insert(tgt.phrase(bi.tgt_rows[q]).as_str(), src.phrase(bi.src_rows[*i]).as_str(), p);
        }
    }
    log::info!(
        "word translation temperatures: forward {:.4}, backward {:.4}",
        bi.tau_fwd,
        bi.tau_bwd
    );
    Ok((fwd, bwd))
}

/// Builds the initial phrase table from two spaces already mapped into a
/// shared space. Rows are taken to be in descending frequency order.
pub fn build_initial_phrase_table(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    config: &InductionConfig,
) -> Result<InducedTable> {
    if config.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
        return Err(Error::InvalidArgument("epsilon must be in (0, 1)".into()));
    }
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch {
            expected: src.dim(),
            got: tgt.dim(),
        });
    }
    let bi = Bidirectional::new(
        src,
        tgt,
        (0..src.len().min(config.max_phrases)).collect(),
        (0..tgt.len().min(config.max_phrases)).collect(),
        config.k,
    )?;
    log::info!(
        "phrase temperatures: forward {:.4}, backward {:.4}",
        bi.tau_fwd,
        bi.tau_bwd
    );
    let (word_fwd, word_bwd) = word_tables(src, tgt, config)?;

    let entries: Vec<PhraseTableEntry> = bi
        .fwd
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, cands)| {
            let cosines: Vec<f64> = cands.iter().map(|c| c.1).collect();
            let probs = softmax_scores(&cosines, bi.tau_fwd);
            let source = src.phrase(bi.src_rows[i]);
            let (bi, word_fwd, word_bwd) = (&bi, &word_fwd, &word_bwd);
            cands.iter().zip(probs).map(move |(&(j, _), p)| {
                let target = tgt.phrase(bi.tgt_rows[j]);
                let (lex_fwd, lex_bwd) = lexical_weighting(source, target, word_fwd, word_bwd);
                let (char_fwd, char_bwd) = subword_score(source, target, config.epsilon);
                PhraseTableEntry {
                    source: source.clone(),
                    target: target.clone(),
                    scores: PhraseScores {
                        phi_fwd: p.clamp(LEX_FLOOR, 1.0),
                        lex_fwd,
                        phi_bwd: bi.backward_prob(i, j),
                        lex_bwd,
                        char_fwd,
                        char_bwd,
                    },
                }
            })
        })
        .collect();
    Ok(InducedTable {
        table: PhraseTable::new(entries),
        tau_fwd: bi.tau_fwd,
        tau_bwd: bi.tau_bwd,
        word_fwd,
        word_bwd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Phrase {
        Phrase::parse(s)
    }

    #[test]
    fn softmax_examples() {
        let probs = softmax_scores(&[0.8, 0.4], 0.2);
        assert!((probs[0] - 0.8808).abs() < 1e-4);
        assert!((probs[1] - 0.1192).abs() < 1e-4);
        assert_eq!(softmax_scores(&[0.3], 0.5), vec![1.0]);
        for v in softmax_scores(&[0.2; 5], 0.01) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_examples() {
        assert!((similarity("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
        assert_eq!(similarity("two", "two"), 1.0);
        assert_eq!(similarity("a", "b"), 0.0);
        assert_eq!(levenshtein("", "abc"), 3);
    }

    #[test]
    fn subword_examples() {
        assert_eq!(subword_score(&p("madrid"), &p("madrid"), 0.3).0, 1.0);
        let (fwd, _) = subword_score(&p("xyz"), &p("abc"), 0.3);
        assert_eq!(fwd, 0.3);
        // forward looks at each target word, here the single word "gatos"
        let (fwd, bwd) = subword_score(&p("cats gato"), &p("gatos"), 0.3);
        assert!((fwd - 0.8).abs() < 1e-12);
        // lev(cats, gatos) = 2 (c→g, insert o)
        assert_eq!(levenshtein("cats", "gatos"), 2);
        assert!((bwd - 0.6 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn lexical_examples() {
        let mut fwd = WordTranslationTable::default();
        let bwd = WordTranslationTable::default();
        fwd.insert("a", "x", 0.9);
        assert!((lexical_weighting(&p("a"), &p("x"), &fwd, &bwd).0 - 0.9).abs() < 1e-12);
        let (f, b) = lexical_weighting(&p("c d"), &p("u v"), &fwd, &bwd);
        assert!((f - 1e-20).abs() < 1e-30);
        assert!((b - 1e-20).abs() < 1e-30);

        let mut fwd = WordTranslationTable::default();
        fwd.insert("a", "x", 0.5);
        fwd.insert("b", "x", 0.2);
        fwd.insert("b", "y", 0.4);
        assert!((lexical_weighting(&p("a b"), &p("x y"), &fwd, &bwd).0 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn temperature_errors() {
        assert!(matches!(estimate_temperature_from(&[]), Err(Error::EmptyInput(_))));
        let single = vec![TemperatureInstance {
            cosines: vec![0.5],
            gold: 0,
        }];
        assert!(matches!(estimate_temperature_from(&single), Err(Error::Unidentifiable(_))));
        let dict = vec![(p("a"), p("z"))];
        let mut cands = FxHashMap::default();
        cands.insert(p("a"), vec![(p("x"), 0.9), (p("y"), 0.1)]);
        assert!(estimate_temperature(&dict, &cands).is_err());
    }

    #[test]
    fn confident_dictionary_pushes_temperature_down() {
        let instances: Vec<_> = (0..20)
            .map(|_| TemperatureInstance {
                cosines: vec![0.9, 0.1, 0.05],
                gold: 0,
            })
            .collect();
        let tau = estimate_temperature_from(&instances).unwrap();
        assert!(tau < 2e-3, "{tau}");
    }

    #[test]
    fn unknown_phrase_is_an_error() {
        let s = EmbeddingSpace::from_rows(vec![p("a")], &[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(translation_candidates(&p("b"), &s, &s, 3), Err(Error::UnknownPhrase(_))));
        assert_eq!(translation_candidates(&p("a"), &s, &s, 3).unwrap().len(), 1);
    }
}

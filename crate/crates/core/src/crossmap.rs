//! Cross-lingual mapping of two monolingual embedding spaces.
//!
//! Mapping starts from the dictionary of identically spelled phrases and
//! alternates an orthogonal Procrustes fit with nearest-neighbour dictionary
//! induction until the dictionary stops changing.

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

use crate::embeddings::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::phrase::Phrase;

/// Length-normalizes, mean-centers per dimension, then length-normalizes
/// again.
pub fn normalize_embeddings(space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
    let mut out = space.clone();
    unit_rows(&mut out)?;
    let n = out.len();
    let dim = out.dim();
    if n > 0 {
        let mut mean = vec![0.0; dim];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(out.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
    unit_rows(&mut out)?;
    Ok(out)
}

fn unit_rows(space: &mut EmbeddingSpace) -> Result<()> {
    for i in 0..space.len() {
        let norm = space.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroVector(space.phrase(i).to_string()));
        }
        space.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

/// A set of `(source phrase, target phrase)` pairs, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dictionary {
    pairs: Vec<(Phrase, Phrase)>,
}

impl Dictionary {
    pub fn new(mut pairs: Vec<(Phrase, Phrase)>) -> Self {
        pairs.sort();
        pairs.dedup();
        Dictionary { pairs }
    }

    pub fn pairs(&self) -> &[(Phrase, Phrase)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, src: &Phrase, tgt: &Phrase) -> bool {
        self.pairs
            .binary_search_by(|(s, t)| (s, t).cmp(&(src, tgt)))
            .is_ok()
    }
}

/// Pairs every phrase spelled identically in both vocabularies with itself.
pub fn seed_identical_dictionary(src: &EmbeddingSpace, tgt: &EmbeddingSpace) -> Result<Dictionary> {
    let pairs: Vec<_> = src
        .phrases()
        .iter()
        .filter(|p| tgt.index_of(p).is_some())
        .map(|p| (p.clone(), p.clone()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoIdenticalPhrases);
    }
    Ok(Dictionary::new(pairs))
}

/// Orthogonal `W = U Vᵀ` from the SVD of `XᵀZ`, maximizing `Σ (XᵢW)·Zᵢ`.
pub fn procrustes_map(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.shape() != z.shape() {
        return Err(Error::InvalidArgument(format!(
            "Procrustes inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            z.shape()
        )));
    }
    let m = x.transpose() * z;
    if m.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("XᵀZ is the zero matrix".into()));
    }
    orthogonal_factor(m)
}

fn orthogonal_factor(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => Ok(u * v_t),
        _ => Err(Error::Degenerate("SVD did not converge".into())),
    }
}

/// Splits a rotation `R` (source to target) into two orthogonal maps that
/// meet halfway: `W_src = polar(I + R)` and `W_tgt = Rᵀ W_src`, so that
/// `W_src W_tgtᵀ = R`. For a proper rotation `W_src` is the principal square
/// root of `R`.
pub fn split_to_average_space(r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = r.nrows();
    let w_src = orthogonal_factor(DMatrix::identity(d, d) + r)?;
    let w_tgt = r.transpose() * &w_src;
    Ok((w_src, w_tgt))
}

/// Multiplies every row of the space by `w` (a `dim × dim` matrix).
pub fn apply_mapping(space: &EmbeddingSpace, w: &DMatrix<f64>) -> EmbeddingSpace {
    let d = space.dim();
    assert_eq!(w.shape(), (d, d), "mapping matrix shape");
    let mut out = space.clone();
    let data = out.data_mut();
    data.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let src = space.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..d {
                acc += src[k] * w[(k, j)];
            }
            *o = acc;
        }
    });
    out
}

pub fn rows_matrix(space: &EmbeddingSpace, rows: &[usize]) -> DMatrix<f64> {
    let d = space.dim();
    DMatrix::from_fn(rows.len(), d, |i, j| space.row(rows[i])[j])
}

/// Frobenius norm of `WᵀW − I`.
pub fn orthogonality_error(w: &DMatrix<f64>) -> f64 {
    let d = w.ncols();
    (w.transpose() * w - DMatrix::<f64>::identity(d, d)).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InductionMode {
    Forward,
    Backward,
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retrieval {
    Cosine,
    /// Cross-domain similarity local scaling with the given neighbourhood.
    Csls { k: usize },
}

impl Retrieval {
    pub const CSLS: Retrieval = Retrieval::Csls { k: 10 };
}

impl std::str::FromStr for Retrieval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Retrieval::Cosine),
            "csls" => Ok(Retrieval::CSLS),
            other => Err(Error::InvalidArgument(format!("unknown retrieval `{other}`"))),
        }
    }
}

/// Unit-normalized copy of selected rows, for cosine scoring by dot product.
pub(crate) struct UnitRows {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl UnitRows {
    pub fn new(space: &EmbeddingSpace, rows: &[usize]) -> Self {
        let dim = space.dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            let v = space.row(r);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            data.extend(v.iter().map(|x| x * inv));
        }
        UnitRows { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `f(q, cosines of row q against every key)` for every row of `self`.
    /// Scores come from blocked matrix products.
    pub fn map_scores<R, F>(&self, keys: &UnitRows, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize, &[f64]) -> R + Sync,
    {
        const BLOCK: usize = 128;
        let (d, n) = (self.dim, keys.len());
        if n == 0 {
            return (0..self.len()).map(|q| f(q, &[])).collect();
        }
        let k = DMatrixView::from_slice_with_strides(&keys.data, n, d, d, 1);
        self.data
            .par_chunks(BLOCK * d)
            .enumerate()
            .flat_map_iter(|(b, chunk)| {
                let q = DMatrixView::from_slice(chunk, d, chunk.len() / d);
                let scores = k * q;
                let f = &f;
                (0..chunk.len() / d)
                    .map(|i| f(b * BLOCK + i, scores.column(i).as_slice()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Top-`k` key indices by `score`, descending, ties by `tie` ascending.
pub(crate) fn top_k_by<T: Ord>(scores: &[f64], k: usize, tie: impl Fn(usize) -> T) -> Vec<(usize, f64)> {
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| tie(*a).cmp(&tie(*b)))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i, scores[i])).collect()
}

/// Mean cosine of each row of `a` to its `k` nearest rows of `b`.
fn mean_top_k_similarity(a: &UnitRows, b: &UnitRows, k: usize) -> Vec<f64> {
    a.map_scores(b, |_, scores| {
        let top = top_k_by(scores, k, |j| j);
        if top.is_empty() {
            0.0
        } else {
            top.iter().map(|(_, s)| s).sum::<f64>() / top.len() as f64
        }
    })
}

/// Index of the best key for each query under the retrieval criterion.
fn nearest(queries: &UnitRows, keys: &UnitRows, retrieval: Retrieval) -> Vec<(usize, f64)> {
    let penalty = match retrieval {
        Retrieval::Cosine => None,
        Retrieval::Csls { k } => Some(mean_top_k_similarity(keys, queries, k)),
    };
    queries.map_scores(keys, |_, cos| {
        let mut best = (usize::MAX, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (j, &c) in cos.iter().enumerate() {
            let s = match &penalty {
                None => c,
                Some(r) => 2.0 * c - r[j],
            };
            if s > best.1 {
                best = (j, s, c);
            }
        }
        (best.0, best.2)
    })
}

/// Row indices of the first `cutoff` phrases (spaces are stored most
/// frequent first).
fn top_rows(space: &EmbeddingSpace, cutoff: usize) -> Vec<usize> {
    (0..space.len().min(cutoff)).collect()
}

/// Induced pairs as row indices, forward pairs first, then backward pairs.
/// Pairs found in both directions appear twice.
fn induce_pairs(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    src_rows: &[usize],
    tgt_rows: &[usize],
    mode: InductionMode,
    retrieval: Retrieval,
) -> Vec<(usize, usize, f64)> {
    let s = UnitRows::new(src, src_rows);
    let t = UnitRows::new(tgt, tgt_rows);
    let mut pairs = Vec::new();
    if matches!(mode, InductionMode::Forward | InductionMode::Union) && t.len() > 0 {
        for (i, (j, cos)) in nearest(&s, &t, retrieval).into_iter().enumerate() {
            pairs.push((src_rows[i], tgt_rows[j], cos));
        }
    }
    if matches!(mode, InductionMode::Backward | InductionMode::Union) && s.len() > 0 {
        for (j, (i, cos)) in nearest(&t, &s, retrieval).into_iter().enumerate() {
            pairs.push((src_rows[i], tgt_rows[j], cos));
        }
    }
    pairs
}

/// Nearest-neighbour dictionary between two mapped spaces.
pub fn induce_dictionary(
    mapped_src: &EmbeddingSpace,
    mapped_tgt: &EmbeddingSpace,
    mode: InductionMode,
    retrieval: Retrieval,
) -> Dictionary {
    let src_rows: Vec<usize> = (0..mapped_src.len()).collect();
    let tgt_rows: Vec<usize> = (0..mapped_tgt.len()).collect();
    let pairs = induce_pairs(mapped_src, mapped_tgt, &src_rows, &tgt_rows, mode, retrieval);
    Dictionary::new(
        pairs
            .into_iter()
            .map(|(i, j, _)| (mapped_src.phrase(i).clone(), mapped_tgt.phrase(j).clone()))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfLearnConfig {
    pub max_iters: usize,
    /// Stop when the objective improves by less than this.
    pub threshold: f64,
    pub retrieval: Retrieval,
    /// Only the most frequent phrases of each side take part in induction.
    pub vocab_cutoff: usize,
}

impl Default for SelfLearnConfig {
    fn default() -> Self {
        SelfLearnConfig {
            max_iters: 50,
            threshold: 1e-6,
            retrieval: Retrieval::Cosine,
            vocab_cutoff: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MappingResult {
    pub w_src: DMatrix<f64>,
    pub w_tgt: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub iterations: usize,
    /// Mean cosine of the induced pairs after each iteration.
    pub objectives: Vec<f64>,
}

impl MappingResult {
    pub fn map_src(&self, space: &EmbeddingSpace) -> EmbeddingSpace {
        apply_mapping(space, &self.w_src)
    }

    pub fn map_tgt(&self, space: &EmbeddingSpace) -> EmbeddingSpace {
        apply_mapping(space, &self.w_tgt)
    }
}

/// Self-learning from the identical-spelling seed. Inputs should already be
/// normalized with [`normalize_embeddings`].
pub fn self_learn(src: &EmbeddingSpace, tgt: &EmbeddingSpace, config: &SelfLearnConfig) -> Result<MappingResult> {
    if src.dim() != tgt.dim() {
        return Err(Error::InvalidArgument(format!(
            "embedding dimensions differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let seed = seed_identical_dictionary(src, tgt)?;
    let d = src.dim();
    let mut result = MappingResult {
        w_src: DMatrix::identity(d, d),
        w_tgt: DMatrix::identity(d, d),
        dictionary: seed.clone(),
        iterations: 0,
        objectives: Vec::new(),
    };
    let mut pairs: Vec<(usize, usize)> = seed
        .pairs()
        .iter()
        .map(|(s, t)| (src.index_of(s).unwrap(), tgt.index_of(t).unwrap()))
        .collect();
    let src_rows = top_rows(src, config.vocab_cutoff);
    let tgt_rows = top_rows(tgt, config.vocab_cutoff);
    let mut previous = f64::NEG_INFINITY;

    for iter in 1..=config.max_iters {
        let xs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let zs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let r = procrustes_map(&rows_matrix(src, &xs), &rows_matrix(tgt, &zs))?;
        let (w_src, w_tgt) = split_to_average_space(&r)?;
        let mapped_src = apply_mapping(src, &w_src);
        let mapped_tgt = apply_mapping(tgt, &w_tgt);
        let induced = induce_pairs(
            &mapped_src,
            &mapped_tgt,
            &src_rows,
            &tgt_rows,
            InductionMode::Union,
            config.retrieval,
        );
        let objective = if induced.is_empty() {
            0.0
        } else {
            induced.iter().map(|p| p.2).sum::<f64>() / induced.len() as f64
        };
        let dictionary = Dictionary::new(
            induced
                .iter()
                .map(|&(i, j, _)| (src.phrase(i).clone(), tgt.phrase(j).clone()))
                .collect(),
        );
        let unchanged = dictionary == result.dictionary;
        log::debug!(
            "self-learning iteration {iter}: objective {objective:.6}, dictionary {}",
            dictionary.len()
        );
        result.w_src = w_src;
        result.w_tgt = w_tgt;
        result.dictionary = dictionary;
        result.iterations = iter;
        result.objectives.push(objective);
        if unchanged || objective - previous < config.threshold {
            break;
        }
        previous = objective;
        pairs = induced.into_iter().map(|(i, j, _)| (i, j)).collect();
    }
    Ok(result)
}

/// Fraction of lexicon entries whose nearest target (by cosine) is the
/// expected translation. Sources missing from the space count as misses.
pub fn precision_at_1(mapped_src: &EmbeddingSpace, mapped_tgt: &EmbeddingSpace, lexicon: &[(Phrase, Phrase)]) -> f64 {
    if lexicon.is_empty() {
        return 0.0;
    }
    let rows: Vec<usize> = lexicon.iter().filter_map(|(s, _)| mapped_src.index_of(s)).collect();
    let queries = UnitRows::new(mapped_src, &rows);
    let all: Vec<usize> = (0..mapped_tgt.len()).collect();
    let keys = UnitRows::new(mapped_tgt, &all);
    let best = nearest(&queries, &keys, Retrieval::Cosine);
    let mut hits = 0;
    let mut q = 0;
    for (s, t) in lexicon {
        if mapped_src.index_of(s).is_none() {
            continue;
        }
        if mapped_tgt.phrase(best[q].0) == t {
            hits += 1;
        }
        q += 1;
    }
    hits as f64 / lexicon.len() as f64
}

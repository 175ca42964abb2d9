//! Phrase tables and lexical reordering tables with their text formats.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rustc_hash::FxHashMap;

use crate::corpus::{create, read_lines};
use crate::error::{Error, Result};
use crate::phrase::Phrase;

/// The six translation scores of a phrase pair, all probabilities in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhraseScores {
    pub phi_fwd: f64,
    pub lex_fwd: f64,
    pub phi_bwd: f64,
    pub lex_bwd: f64,
    pub char_fwd: f64,
    pub char_bwd: f64,
}

impl PhraseScores {
    pub const NAMES: [&'static str; 6] = ["phi_fwd", "lex_fwd", "phi_bwd", "lex_bwd", "char_fwd", "char_bwd"];

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.phi_fwd,
            self.lex_fwd,
            self.phi_bwd,
            self.lex_bwd,
            self.char_fwd,
            self.char_bwd,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        PhraseScores {
            phi_fwd: a[0],
            lex_fwd: a[1],
            phi_bwd: a[2],
            lex_bwd: a[3],
            char_fwd: a[4],
            char_bwd: a[5],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|&v| v > 0.0 && v <= 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhraseTableEntry {
    pub source: Phrase,
    pub target: Phrase,
    pub scores: PhraseScores,
}

/// Entries sorted by source then target, with an index from source phrase to
/// its options.
#[derive(Debug, Clone, Default)]
pub struct PhraseTable {
    entries: Vec<PhraseTableEntry>,
    index: FxHashMap<Phrase, Range<usize>>,
    max_source_order: usize,
}

impl PhraseTable {
    /// Builds a table; duplicate pairs keep their first occurrence.
    pub fn new(mut entries: Vec<PhraseTableEntry>) -> Self {
        entries.sort_by(|a, b| (&a.source, &a.target).cmp(&(&b.source, &b.target)));
        entries.dedup_by(|b, a| a.source == b.source && a.target == b.target);
        let mut index = FxHashMap::default();
        let mut start = 0;
        for i in 1..=entries.len() {
            if i == entries.len() || entries[i].source != entries[start].source {
                index.insert(entries[start].source.clone(), start..i);
                start = i;
            }
        }
        let max_source_order = entries.iter().map(|e| e.source.order()).max().unwrap_or(0);
        PhraseTable {
            entries,
            index,
            max_source_order,
        }
    }

    pub fn entries(&self) -> &[PhraseTableEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_source_order(&self) -> usize {
        self.max_source_order
    }

    pub fn options(&self, source: &Phrase) -> &[PhraseTableEntry] {
        self.index.get(source).map_or(&[], |r| &self.entries[r.clone()])
    }

    pub fn get(&self, source: &Phrase, target: &Phrase) -> Option<&PhraseTableEntry> {
        let opts = self.options(source);
        opts.binary_search_by(|e| e.target.cmp(target)).ok().map(|i| &opts[i])
    }

    pub fn num_sources(&self) -> usize {
        self.index.len()
    }

    /// Keeps the `k` options with the highest `phi_fwd` for every source.
    pub fn prune(&self, k: usize) -> PhraseTable {
        let mut kept = Vec::new();
        let mut sources: Vec<&Phrase> = self.index.keys().collect();
        sources.sort();
        for s in sources {
            let mut opts: Vec<&PhraseTableEntry> = self.options(s).iter().collect();
            opts.sort_by(|a, b| {
                b.scores
                    .phi_fwd
                    .total_cmp(&a.scores.phi_fwd)
                    .then_with(|| a.target.cmp(&b.target))
            });
            kept.extend(opts.into_iter().take(k).cloned());
        }
        PhraseTable::new(kept)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            let scores: Vec<String> = e.scores.to_array().iter().map(|&v| format_g6(v)).collect();
            writeln!(w, "{} ||| {} ||| {} ||| |||", e.source, e.target, scores.join(" "))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        self.write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let what = path.display().to_string();
        let mut entries = Vec::new();
        for (i, line) in read_lines(path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split("|||").map(str::trim).collect();
            if fields.len() < 3 {
                return Err(Error::parse(&what, i + 1, "expected `src ||| tgt ||| scores`"));
            }
            let scores = parse_scores::<6>(fields[2]).ok_or_else(|| Error::parse(&what, i + 1, "expected six scores"))?;
            entries.push(PhraseTableEntry {
                source: Phrase::parse(fields[0]),
                target: Phrase::parse(fields[1]),
                scores: PhraseScores::from_array(scores),
            });
        }
        Ok(PhraseTable::new(entries))
    }
}

fn parse_scores<const N: usize>(field: &str) -> Option<[f64; N]> {
    let values: Vec<f64> = field
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    values.try_into().ok()
}

/// Formats like C's `%g`: six significant digits, trailing zeros removed,
/// exponent form outside `[1e-4, 1e6)`.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{:.*}", (5 - exp) as usize, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Monotone,
    Swap,
    Discontinuous,
}

impl Orientation {
    pub fn index(self) -> usize {
        match self {
            Orientation::Monotone => 0,
            Orientation::Swap => 1,
            Orientation::Discontinuous => 2,
        }
    }
}

/// Orientation probabilities for a phrase pair: `[0..3]` relative to the
/// previous phrase, `[3..6]` relative to the next, each as
/// (monotone, swap, discontinuous).
pub type OrientationProbs = [f64; 6];

#[derive(Debug, Clone, Default)]
pub struct ReorderingModel {
    probs: FxHashMap<(Phrase, Phrase), OrientationProbs>,
}

impl ReorderingModel {
    pub fn new(probs: FxHashMap<(Phrase, Phrase), OrientationProbs>) -> Self {
        ReorderingModel { probs }
    }

    pub fn get(&self, source: &Phrase, target: &Phrase) -> Option<&OrientationProbs> {
        self.probs.get(&(source.clone(), target.clone()))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Phrase, Phrase), &OrientationProbs)> {
        self.probs.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<_> = self.probs.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut w = create(path)?;
        for ((s, t), p) in rows {
            let values: Vec<String> = p.iter().map(|&v| format_g6(v)).collect();
            writeln!(w, "{s} ||| {t} ||| {}", values.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let what = path.display().to_string();
        let mut probs = FxHashMap::default();
        for (i, line) in read_lines(path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split("|||").map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::parse(&what, i + 1, "expected `src ||| tgt ||| probabilities`"));
            }
            let p = parse_scores::<6>(fields[2]).ok_or_else(|| Error::parse(&what, i + 1, "expected six probabilities"))?;
            probs.insert((Phrase::parse(fields[0]), Phrase::parse(fields[1])), p);
        }
        Ok(ReorderingModel { probs })
    }
}

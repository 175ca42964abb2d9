//! End-to-end orchestration with on-disk artifacts.
//!
//! Every stage reads its inputs from the artifact directory, writes its
//! outputs there and records a manifest line keyed by a digest of its
//! parameters and input files. A rerun skips any stage whose key is
//! unchanged and whose outputs are present.
//!
//! Layout (schema `monoses-artifacts/1`):
//!
//! ```text
//! SCHEMA  manifest.tsv  log.tsv
//! prep/{e,f}.tok  prep/{e,f}.truecase
//! inventory/{e,f}.tsv
//! embed/{e,f}.emb
//! map/{e,f}.emb  map/dictionary.tsv
//! induce/{ef,fe}.table
//! lm/{e,f}.arpa
//! tune/{ef,fe}/  tune/loss.tsv
//! refine/{ef,fe}/  refine/report.tsv
//! eval/hyp.txt  eval/report.txt
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bleu::{bleu_stats, corpus_bleu, BleuStats, Smoothing};
use crate::corpus::{
    build_ngram_inventory, create, normalize_and_tokenize, prepare_corpus, read_corpus, read_lines, write_corpus,
    InventoryCaps, PhraseInventory, TruecaseModel,
};
use crate::crossmap::{normalize_embeddings, self_learn, Retrieval, SelfLearnConfig};
use crate::decoder::{DecoderConfig, UnkHandling};
use crate::embeddings::{train_phrase_embeddings, EmbeddingSpace, SgnsConfig};
use crate::error::{Error, Result};
use crate::ngram_lm::{LanguageModel, LmConfig};
use crate::phrase::Sentence;
use crate::phrase_induction::{build_initial_phrase_table, InductionConfig};
use crate::phrase_table::PhraseTable;
use crate::refine::{refine_loop, RefineConfig};
use crate::system::System;
use crate::tuning::{alternating_tune, Hinge, LossBreakdown, TuneConfig};

pub const SCHEMA: &str = "monoses-artifacts/1";
pub const STAGES: [&str; 9] = ["prep", "inventory", "embed", "map", "induce", "lm", "tune", "refine", "eval"];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus_e: PathBuf,
    pub corpus_f: PathBuf,
    pub out_dir: PathBuf,
    /// Held-out E text and its F reference for the final evaluation.
    pub test_source: Option<PathBuf>,
    pub test_reference: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub caps: InventoryCaps,
    pub sgns: SgnsConfig,
    pub mapping: SelfLearnConfig,
    pub induction: InductionConfig,
    pub lm_order: usize,
    pub decoder: DecoderConfig,
    pub tune_sample: usize,
    pub tune: TuneConfig,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus_e: PathBuf::new(),
            corpus_f: PathBuf::new(),
            out_dir: PathBuf::from("artifacts"),
            test_source: None,
            test_reference: None,
            seed: 1,
            jobs: 1,
            caps: InventoryCaps::default(),
            sgns: SgnsConfig::default(),
            mapping: SelfLearnConfig::default(),
            induction: InductionConfig::default(),
            lm_order: 5,
            decoder: DecoderConfig::default(),
            tune_sample: 2000,
            tune: TuneConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad value `{value}` for `{key}`"))),
    }
}

impl PipelineConfig {
    /// Recognized keys, in the order [`PipelineConfig::to_text`] writes them.
    pub const KEYS: [&'static str; 40] = [
        "corpus_e",
        "corpus_f",
        "out_dir",
        "test_source",
        "test_reference",
        "seed",
        "jobs",
        "max_unigrams",
        "max_bigrams",
        "max_trigrams",
        "dim",
        "window",
        "negatives",
        "epochs",
        "learning_rate",
        "subsample",
        "retrieval",
        "map_vocab",
        "map_max_iters",
        "map_threshold",
        "k",
        "epsilon",
        "induce_max_phrases",
        "lm_order",
        "beam",
        "distortion_limit",
        "max_phrase_len",
        "nbest",
        "max_options",
        "unk",
        "tune_sample",
        "tune_rounds",
        "tune_iterations",
        "random_directions",
        "hinge",
        "back_translation_beam",
        "refine_iterations",
        "synthetic_cap",
        "extract_max_len",
        "renormalize",
    ];

    /// Sets one key. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "corpus_e" => self.corpus_e = PathBuf::from(v),
            "corpus_f" => self.corpus_f = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "test_source" => self.test_source = (!v.is_empty()).then(|| PathBuf::from(v)),
            "test_reference" => self.test_reference = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.sgns.seed = self.seed;
                self.tune.seed = self.seed;
            }
            "jobs" => {
                self.jobs = parse_num(key, v)?;
                self.sgns.threads = self.jobs;
            }
            "max_unigrams" => self.caps.unigrams = parse_num(key, v)?,
            "max_bigrams" => self.caps.bigrams = parse_num(key, v)?,
            "max_trigrams" => self.caps.trigrams = parse_num(key, v)?,
            "dim" => self.sgns.dimension = parse_num(key, v)?,
            "window" => self.sgns.window = parse_num(key, v)?,
            "negatives" => self.sgns.negatives = parse_num(key, v)?,
            "epochs" => self.sgns.epochs = parse_num(key, v)?,
            "learning_rate" => self.sgns.learning_rate = parse_num(key, v)?,
            "subsample" => self.sgns.subsample = parse_num(key, v)?,
            "retrieval" => self.mapping.retrieval = v.parse::<Retrieval>()?,
            "map_vocab" => self.mapping.vocab_cutoff = parse_num(key, v)?,
            "map_max_iters" => self.mapping.max_iters = parse_num(key, v)?,
            "map_threshold" => self.mapping.threshold = parse_num(key, v)?,
            "k" => self.induction.k = parse_num(key, v)?,
            "epsilon" => {
                self.induction.epsilon = parse_num(key, v)?;
                self.refine.epsilon = self.induction.epsilon;
            }
            "induce_max_phrases" => self.induction.max_phrases = parse_num(key, v)?,
            "lm_order" => self.lm_order = parse_num(key, v)?,
            "beam" => self.decoder.beam_size = parse_num(key, v)?,
            "distortion_limit" => self.decoder.distortion_limit = parse_num(key, v)?,
            "max_phrase_len" => self.decoder.max_phrase_len = parse_num(key, v)?,
            "nbest" => {
                self.decoder.nbest = parse_num(key, v)?;
                self.tune.nbest = self.decoder.nbest;
            }
            "max_options" => self.decoder.max_options = parse_num(key, v)?,
            "unk" => {
                self.decoder.unk = match v {
                    "copy" => UnkHandling::Copy,
                    "drop" => UnkHandling::Drop,
                    _ => return Err(Error::InvalidArgument(format!("bad value `{v}` for `unk`"))),
                }
            }
            "tune_sample" => self.tune_sample = parse_num(key, v)?,
            "tune_rounds" => self.tune.rounds = parse_num(key, v)?,
            "tune_iterations" => self.tune.max_iterations = parse_num(key, v)?,
            "random_directions" => self.tune.random_directions = parse_num(key, v)?,
            "hinge" => {
                self.tune.hinge = match v {
                    "translated_above_natural" => Hinge::TranslatedAboveNatural,
                    "natural_above_translated" => Hinge::NaturalAboveTranslated,
                    _ => return Err(Error::InvalidArgument(format!("bad value `{v}` for `hinge`"))),
                }
            }
            "back_translation_beam" => self.tune.back_translation_beam = parse_num(key, v)?,
            "refine_iterations" => self.refine.iterations = parse_num(key, v)?,
            "synthetic_cap" => self.refine.cap = parse_num(key, v)?,
            "extract_max_len" => self.refine.max_phrase_len = parse_num(key, v)?,
            "renormalize" => self.refine.renormalize = parse_bool(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown configuration key `{other}`"))),
        }
        // refinement retunes with the same settings
        self.refine.tune = self.tune.clone();
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = PipelineConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("pipeline config", i + 1, "expected key=value"))?;
            config
                .set(k, v)
                .map_err(|e| Error::parse("pipeline config", i + 1, e.to_string()))?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        // relative corpus paths are relative to the config file
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() && !p.as_os_str().is_empty() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut config.corpus_e);
            fix(&mut config.corpus_f);
            fix(&mut config.out_dir);
            if let Some(p) = config.test_source.as_mut() {
                fix(p);
            }
            if let Some(p) = config.test_reference.as_mut() {
                fix(p);
            }
        }
        Ok(config)
    }

    /// The value of `key` as it would be written in a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Path| p.display().to_string();
        let opt = |p: &Option<PathBuf>| p.as_deref().map(path).unwrap_or_default();
        Some(match key {
            "corpus_e" => path(&self.corpus_e),
            "corpus_f" => path(&self.corpus_f),
            "out_dir" => path(&self.out_dir),
            "test_source" => opt(&self.test_source),
            "test_reference" => opt(&self.test_reference),
            "seed" => self.seed.to_string(),
            "jobs" => self.jobs.to_string(),
            "max_unigrams" => self.caps.unigrams.to_string(),
            "max_bigrams" => self.caps.bigrams.to_string(),
            "max_trigrams" => self.caps.trigrams.to_string(),
            "dim" => self.sgns.dimension.to_string(),
            "window" => self.sgns.window.to_string(),
            "negatives" => self.sgns.negatives.to_string(),
            "epochs" => self.sgns.epochs.to_string(),
            "learning_rate" => self.sgns.learning_rate.to_string(),
            "subsample" => self.sgns.subsample.to_string(),
            "retrieval" => match self.mapping.retrieval {
                Retrieval::Cosine => "cosine".into(),
                Retrieval::Csls { .. } => "csls".into(),
            },
            "map_vocab" => self.mapping.vocab_cutoff.to_string(),
            "map_max_iters" => self.mapping.max_iters.to_string(),
            "map_threshold" => self.mapping.threshold.to_string(),
            "k" => self.induction.k.to_string(),
            "epsilon" => self.induction.epsilon.to_string(),
            "induce_max_phrases" => self.induction.max_phrases.to_string(),
            "lm_order" => self.lm_order.to_string(),
            "beam" => self.decoder.beam_size.to_string(),
            "distortion_limit" => self.decoder.distortion_limit.to_string(),
            "max_phrase_len" => self.decoder.max_phrase_len.to_string(),
            "nbest" => self.decoder.nbest.to_string(),
            "max_options" => self.decoder.max_options.to_string(),
            "unk" => match self.decoder.unk {
                UnkHandling::Copy => "copy".into(),
                UnkHandling::Drop => "drop".into(),
            },
            "tune_sample" => self.tune_sample.to_string(),
            "tune_rounds" => self.tune.rounds.to_string(),
            "tune_iterations" => self.tune.max_iterations.to_string(),
            "random_directions" => self.tune.random_directions.to_string(),
            "hinge" => match self.tune.hinge {
                Hinge::TranslatedAboveNatural => "translated_above_natural".into(),
                Hinge::NaturalAboveTranslated => "natural_above_translated".into(),
            },
            "back_translation_beam" => self.tune.back_translation_beam.to_string(),
            "refine_iterations" => self.refine.iterations.to_string(),
            "synthetic_cap" => self.refine.cap.to_string(),
            "extract_max_len" => self.refine.max_phrase_len.to_string(),
            "renormalize" => self.refine.renormalize.to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Checks ranges and that every input file exists.
    pub fn validate(&self) -> Result<()> {
        for p in [&self.corpus_e, &self.corpus_f]
            .into_iter()
            .chain(self.test_source.as_ref())
            .chain(self.test_reference.as_ref())
        {
            if !p.is_file() {
                return Err(Error::MissingPath(p.clone()));
            }
        }
        if self.test_source.is_some() != self.test_reference.is_some() {
            return Err(Error::InvalidArgument(
                "test_source and test_reference must be given together".into(),
            ));
        }
        if self.jobs == 0 || self.lm_order == 0 || self.tune_sample == 0 {
            return Err(Error::InvalidArgument("jobs, lm_order and tune_sample must be positive".into()));
        }
        if self.refine.iterations == 0 || self.tune.rounds == 0 {
            return Err(Error::InvalidArgument("refine_iterations and tune_rounds must be positive".into()));
        }
        if !(self.induction.epsilon > 0.0 && self.induction.epsilon < 1.0) {
            return Err(Error::InvalidArgument("epsilon must be in (0, 1)".into()));
        }
        self.sgns.validate()?;
        self.decoder.validate()
    }
}

/// Corpus BLEU with its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub brevity_penalty: f64,
    pub precisions: [f64; 4],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuReport {
    pub fn from_stats(stats: &BleuStats, smoothing: Smoothing) -> Self {
        BleuReport {
            bleu: corpus_bleu(stats, smoothing).unwrap_or(0.0),
            brevity_penalty: stats.brevity_penalty(),
            precisions: [0, 1, 2, 3].map(|n| stats.precision(n, smoothing)),
            hyp_len: stats.hyp_len,
            ref_len: stats.ref_len,
        }
    }

    pub fn of<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>], smoothing: Smoothing) -> Result<Self> {
        if hyps.len() != refs.len() {
            return Err(Error::LineCountMismatch {
                left: "hypotheses".into(),
                left_lines: hyps.len(),
                right: "references".into(),
                right_lines: refs.len(),
            });
        }
        let stats: BleuStats = hyps.iter().zip(refs).map(|(h, r)| bleu_stats(h, r)).sum();
        Ok(Self::from_stats(&stats, smoothing))
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU\t{:.4}", self.bleu)?;
        writeln!(f, "brevity_penalty\t{:.4}", self.brevity_penalty)?;
        for (n, p) in self.precisions.iter().enumerate() {
            writeln!(f, "precision_{}\t{:.4}", n + 1, p)?;
        }
        writeln!(f, "hyp_len\t{}", self.hyp_len)?;
        write!(f, "ref_len\t{}", self.ref_len)
    }
}

/// Translates `source` and scores it against `reference`.
pub fn evaluate(system: &System, source: &[Sentence], reference: &[Sentence]) -> Result<(Vec<Sentence>, BleuReport)> {
    if source.len() != reference.len() {
        return Err(Error::LineCountMismatch {
            left: "test source".into(),
            left_lines: source.len(),
            right: "test reference".into(),
            right_lines: reference.len(),
        });
    }
    let hyps = system.translate_corpus(source);
    let report = BleuReport::of(&hyps, reference, Smoothing::None)?;
    Ok((hyps, report))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn timestamp() -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", t.as_secs(), t.subsec_millis())
}

/// Stages executed and skipped by one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub report: Option<BleuReport>,
}

struct Runner {
    dir: PathBuf,
    manifest: BTreeMap<String, String>,
    log: std::io::BufWriter<std::fs::File>,
}

fn system_files(dir: &Path) -> Vec<PathBuf> {
    [
        crate::system::TABLE_FILE,
        crate::system::REORDERING_FILE,
        crate::system::WEIGHTS_FILE,
        crate::system::DECODER_FILE,
        crate::system::LM_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .filter(|p| p.exists() || !p.ends_with(crate::system::REORDERING_FILE))
    .collect()
}

impl Runner {
    fn open(config: &PipelineConfig) -> Result<Self> {
        let dir = config.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let schema = dir.join("SCHEMA");
        if schema.exists() {
            let found = std::fs::read_to_string(&schema).map_err(|e| Error::io(&schema, e))?;
            if found.trim() != SCHEMA {
                return Err(Error::InvalidArgument(format!(
                    "{} holds artifacts of schema `{}`, expected `{SCHEMA}`",
                    dir.display(),
                    found.trim()
                )));
            }
        } else {
            std::fs::write(&schema, format!("{SCHEMA}\n")).map_err(|e| Error::io(&schema, e))?;
        }
        let mut manifest = BTreeMap::new();
        let mpath = dir.join("manifest.tsv");
        if mpath.exists() {
            for line in read_lines(&mpath)? {
                let mut parts = line.splitn(3, '\t');
                if let (Some(stage), Some(key)) = (parts.next(), parts.next()) {
                    manifest.insert(stage.to_string(), key.to_string());
                }
            }
        }
        let lpath = dir.join("log.tsv");
        let log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&lpath)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(&lpath, e))?;
        Ok(Runner {
            dir,
            manifest,
            log,
        })
    }

    fn event(&mut self, stage: &str, event: &str) {
        log::info!("{stage}: {event}");
        let _ = writeln!(self.log, "{}\t{stage}\t{event}", timestamp());
        let _ = self.log.flush();
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join("manifest.tsv");
        let mut w = create(&path)?;
        for (stage, key) in &self.manifest {
            writeln!(w, "{stage}\t{key}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Runs `body` unless the manifest shows the same key and every output
    /// exists. Returns whether the stage ran.
    fn stage(
        &mut self,
        name: &str,
        params: String,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        body: impl FnOnce(&mut Self) -> Result<()>,
    ) -> Result<bool> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let mut hasher = Sha256::new();
        hasher.update(name.as_bytes());
        hasher.update(b"\0");
        hasher.update(params.as_bytes());
        for input in &inputs {
            if !input.exists() {
                return Err(wrap(Error::MissingPath(input.clone())));
            }
            hasher.update(b"\0");
            hasher.update(file_digest(input).map_err(wrap)?.as_bytes());
        }
        let key = format!("{:x}", hasher.finalize());
        if self.manifest.get(name) == Some(&key) && outputs.iter().all(|p| p.exists()) {
            self.event(name, "skip (unchanged)");
            return Ok(false);
        }
        self.event(name, "start");
        body(self).map_err(|e| {
            self.event(name, &format!("failed: {e}"));
            wrap(e)
        })?;
        self.manifest.insert(name.to_string(), key);
        self.write_manifest().map_err(wrap)?;
        self.event(name, "done");
        Ok(true)
    }
}

fn load_system_pair(dir: &Path, lm_e: &Path, lm_f: &Path) -> Result<(System, System)> {
    let lm_e = Arc::new(LanguageModel::load_arpa(lm_e)?);
    let lm_f = Arc::new(LanguageModel::load_arpa(lm_f)?);
    Ok((
        System::load(&dir.join("ef"), Some(lm_f))?,
        System::load(&dir.join("fe"), Some(lm_e))?,
    ))
}

/// Up to `n` non-empty sentences drawn without replacement, in corpus order.
pub fn sample_non_empty(corpus: &[Sentence], n: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].is_empty()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| corpus[i].clone()).collect()
}

fn tuning_samples(config: &PipelineConfig, e: &[Sentence], f: &[Sentence]) -> (Vec<Sentence>, Vec<Sentence>) {
    (
        sample_non_empty(e, config.tune_sample, config.seed),
        sample_non_empty(f, config.tune_sample, config.seed.wrapping_add(1)),
    )
}

fn write_loss_log(path: &Path, initial: &LossBreakdown, halves: &[(String, LossBreakdown)]) -> Result<()> {
    let mut w = create(path)?;
    let mut text = format!("step\ttuned\t{}\n0\t-\t{}\n", LossBreakdown::TSV_HEADER, initial.to_tsv());
    for (i, (dir, b)) in halves.iter().enumerate() {
        text.push_str(&format!("{}\t{dir}\t{}\n", i + 1, b.to_tsv()));
    }
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Runs every stage in order, or only `only`. Stages whose inputs and
/// parameters are unchanged are skipped.
pub fn run_pipeline(config: &PipelineConfig, only: Option<&str>) -> Result<RunSummary> {
    if let Some(s) = only {
        if !STAGES.contains(&s) {
            return Err(Error::InvalidArgument(format!(
                "unknown stage `{s}`; expected one of {}",
                STAGES.join(", ")
            )));
        }
    }
    config.validate()?;
    let mut r = Runner::open(config)?;
    let mut summary = RunSummary::default();
    let wanted = |s: &str| only.is_none_or(|o| o == s);
    let record = |name: &str, ran: bool, summary: &mut RunSummary| {
        if ran {
            summary.executed.push(name.to_string());
        } else {
            summary.skipped.push(name.to_string());
        }
    };
    let c = config;

    let tok = |l: &str| format!("prep/{l}.tok");
    let (tok_e, tok_f) = (r.path(&tok("e")), r.path(&tok("f")));
    if wanted("prep") {
        let outs = vec![tok_e.clone(), tok_f.clone(), r.path("prep/e.truecase"), r.path("prep/f.truecase")];
        let ran = r.stage("prep", String::new(), vec![c.corpus_e.clone(), c.corpus_f.clone()], outs, |r| {
            for (input, lang) in [(&c.corpus_e, "e"), (&c.corpus_f, "f")] {
                let (corpus, model) = prepare_corpus(&read_lines(input)?);
                write_corpus(&r.path(&tok(lang)), &corpus)?;
                model.save(&r.path(&format!("prep/{lang}.truecase")))?;
            }
            Ok(())
        })?;
        record("prep", ran, &mut summary);
    }

    let (inv_e, inv_f) = (r.path("inventory/e.tsv"), r.path("inventory/f.tsv"));
    if wanted("inventory") {
        let params = format!("{:?}", c.caps);
        let ran = r.stage("inventory", params, vec![tok_e.clone(), tok_f.clone()], vec![inv_e.clone(), inv_f.clone()], |_| {
            for (t, out) in [(&tok_e, &inv_e), (&tok_f, &inv_f)] {
                build_ngram_inventory(&read_corpus(t)?, c.caps).save(out)?;
            }
            Ok(())
        })?;
        record("inventory", ran, &mut summary);
    }

    let (emb_e, emb_f) = (r.path("embed/e.emb"), r.path("embed/f.emb"));
    if wanted("embed") {
        let params = format!("{:?}", c.sgns);
        let inputs = vec![tok_e.clone(), tok_f.clone(), inv_e.clone(), inv_f.clone()];
        let ran = r.stage("embed", params, inputs, vec![emb_e.clone(), emb_f.clone()], |_| {
            for (i, (t, inv, out)) in [(&tok_e, &inv_e, &emb_e), (&tok_f, &inv_f, &emb_f)].into_iter().enumerate() {
                let sgns = SgnsConfig {
                    seed: c.sgns.seed.wrapping_add(i as u64),
                    ..c.sgns.clone()
                };
                train_phrase_embeddings(&read_corpus(t)?, &PhraseInventory::load(inv)?, &sgns)?.save(out)?;
            }
            Ok(())
        })?;
        record("embed", ran, &mut summary);
    }

    let (map_e, map_f) = (r.path("map/e.emb"), r.path("map/f.emb"));
    if wanted("map") {
        let params = format!("{:?}", c.mapping);
        let outs = vec![map_e.clone(), map_f.clone(), r.path("map/dictionary.tsv")];
        let ran = r.stage("map", params, vec![emb_e.clone(), emb_f.clone()], outs, |r| {
            let e = normalize_embeddings(&EmbeddingSpace::load(&emb_e)?)?;
            let f = normalize_embeddings(&EmbeddingSpace::load(&emb_f)?)?;
            let result = self_learn(&e, &f, &c.mapping)?;
            result.map_src(&e).save(&map_e)?;
            result.map_tgt(&f).save(&map_f)?;
            let path = r.path("map/dictionary.tsv");
            let mut w = create(&path)?;
            for (s, t) in result.dictionary.pairs() {
                writeln!(w, "{s}\t{t}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        })?;
        record("map", ran, &mut summary);
    }

    let (table_ef, table_fe) = (r.path("induce/ef.table"), r.path("induce/fe.table"));
    if wanted("induce") {
        let params = format!("{:?}", c.induction);
        let ran = r.stage("induce", params, vec![map_e.clone(), map_f.clone()], vec![table_ef.clone(), table_fe.clone()], |_| {
            let e = EmbeddingSpace::load(&map_e)?;
            let f = EmbeddingSpace::load(&map_f)?;
            let ef = build_initial_phrase_table(&e, &f, &c.induction)?;
            log::info!("E→F temperatures {:.4}/{:.4}", ef.tau_fwd, ef.tau_bwd);
            ef.table.save(&table_ef)?;
            let fe = build_initial_phrase_table(&f, &e, &c.induction)?;
            fe.table.save(&table_fe)
        })?;
        record("induce", ran, &mut summary);
    }

    let (lm_e, lm_f) = (r.path("lm/e.arpa"), r.path("lm/f.arpa"));
    if wanted("lm") {
        let params = format!("order={}", c.lm_order);
        let ran = r.stage("lm", params, vec![tok_e.clone(), tok_f.clone()], vec![lm_e.clone(), lm_f.clone()], |_| {
            let lc = LmConfig {
                order: c.lm_order,
                ..Default::default()
            };
            for (t, out) in [(&tok_e, &lm_e), (&tok_f, &lm_f)] {
                LanguageModel::train(&read_corpus(t)?, &lc)?.save_arpa(out)?;
            }
            Ok(())
        })?;
        record("lm", ran, &mut summary);
    }

    let tune_dir = r.path("tune");
    if wanted("tune") {
        let params = format!("{:?}|{:?}|sample={}", c.decoder, c.tune, c.tune_sample);
        let inputs = vec![table_ef.clone(), table_fe.clone(), lm_e.clone(), lm_f.clone(), tok_e.clone(), tok_f.clone()];
        let mut outs = system_files(&tune_dir.join("ef"));
        outs.extend(system_files(&tune_dir.join("fe")));
        outs.push(tune_dir.join("loss.tsv"));
        let ran = r.stage("tune", params, inputs, outs, |_| {
            let le = Arc::new(LanguageModel::load_arpa(&lm_e)?);
            let lf = Arc::new(LanguageModel::load_arpa(&lm_f)?);
            let ef = System::new(PhraseTable::load(&table_ef)?, lf, c.decoder.clone());
            let fe = System::new(PhraseTable::load(&table_fe)?, le, c.decoder.clone());
            let (se, sf) = tuning_samples(c, &read_corpus(&tok_e)?, &read_corpus(&tok_f)?);
            let result = alternating_tune(&ef, &fe, &se, &sf, &c.tune)?;
            ef.with_weights(result.weights_ef).save(&tune_dir.join("ef"))?;
            fe.with_weights(result.weights_fe).save(&tune_dir.join("fe"))?;
            let halves: Vec<(String, LossBreakdown)> = result
                .half_rounds
                .iter()
                .map(|h| (h.direction.to_string(), h.breakdown))
                .collect();
            write_loss_log(&tune_dir.join("loss.tsv"), &result.initial, &halves)
        })?;
        record("tune", ran, &mut summary);
    }

    let refine_dir = r.path("refine");
    if wanted("refine") {
        let params = format!("{:?}|sample={}", c.refine, c.tune_sample);
        let mut inputs = system_files(&tune_dir.join("ef"));
        inputs.extend(system_files(&tune_dir.join("fe")));
        inputs.extend([tok_e.clone(), tok_f.clone()]);
        let mut outs = system_files(&refine_dir.join("ef"));
        outs.extend(system_files(&refine_dir.join("fe")));
        outs.push(refine_dir.join("report.tsv"));
        let ran = r.stage("refine", params, inputs, outs, |_| {
            let (ef, fe) = load_system_pair(&tune_dir, &lm_e, &lm_f)?;
            let mono_e = read_corpus(&tok_e)?;
            let mono_f = read_corpus(&tok_f)?;
            let (se, sf) = tuning_samples(c, &mono_e, &mono_f);
            let outcome = refine_loop(&ef, &fe, &mono_e, &mono_f, (&se, &sf), &c.refine)?;
            outcome.system_ef.save(&refine_dir.join("ef"))?;
            outcome.system_fe.save(&refine_dir.join("fe"))?;
            let path = refine_dir.join("report.tsv");
            let mut w = create(&path)?;
            let mut text = String::from("iteration\tsynthetic_e\tsynthetic_f\ttable_ef\ttable_fe\tfinal_loss\n");
            for it in &outcome.iterations {
                let loss = it.tuning.as_ref().map_or("-".to_string(), |t| t.final_loss().total.to_string());
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{loss}\n",
                    it.iteration, it.synthetic_pairs.0, it.synthetic_pairs.1, it.table_sizes.0, it.table_sizes.1
                ));
            }
            w.write_all(text.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))
        })?;
        record("refine", ran, &mut summary);
    }

    if wanted("eval") {
        match (&c.test_source, &c.test_reference) {
            (Some(src), Some(reference)) => {
                let mut inputs = system_files(&refine_dir.join("ef"));
                inputs.extend([src.clone(), reference.clone(), r.path("prep/e.truecase"), r.path("prep/f.truecase")]);
                let (hyp_path, report_path) = (r.path("eval/hyp.txt"), r.path("eval/report.txt"));
                let ran = r.stage("eval", String::new(), inputs, vec![hyp_path.clone(), report_path.clone()], |r| {
                    let tc_e = TruecaseModel::load(&r.path("prep/e.truecase"))?;
                    let tc_f = TruecaseModel::load(&r.path("prep/f.truecase"))?;
                    let prep = |path: &Path, tc: &TruecaseModel| -> Result<Vec<Sentence>> {
                        Ok(read_lines(path)?.iter().map(|l| tc.apply(&normalize_and_tokenize(l))).collect())
                    };
                    let (system, _) = load_system_pair(&refine_dir, &lm_e, &lm_f)?;
                    let (hyps, report) = evaluate(&system, &prep(src, &tc_e)?, &prep(reference, &tc_f)?)?;
                    write_corpus(&hyp_path, &hyps)?;
                    std::fs::write(&report_path, format!("{report}\n")).map_err(|e| Error::io(&report_path, e))
                })?;
                record("eval", ran, &mut summary);
                summary.report = Some(read_report(&report_path)?);
            }
            _ => r.event("eval", "skip (no test set configured)"),
        }
    }
    Ok(summary)
}

/// Reads a report written by the eval stage.
pub fn read_report(path: &Path) -> Result<BleuReport> {
    let what = path.display().to_string();
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&what, i + 1, "expected name<TAB>value"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<f64> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(&what, 0, format!("missing `{k}`")))
    };
    Ok(BleuReport {
        bleu: get("BLEU")?,
        brevity_penalty: get("brevity_penalty")?,
        precisions: [get("precision_1")?, get("precision_2")?, get("precision_3")?, get("precision_4")?],
        hyp_len: get("hyp_len")? as u64,
        ref_len: get("ref_len")? as u64,
    })
}

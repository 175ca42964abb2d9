//! A complete translation system for one direction.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::corpus::{create, read_lines};
use crate::decoder::{Decoder, DecoderConfig, LogLinearWeights, UnkHandling};
use crate::error::{Error, Result};
use crate::ngram_lm::LanguageModel;
use crate::phrase_table::{PhraseTable, ReorderingModel};

pub const TABLE_FILE: &str = "phrase-table.txt";
pub const REORDERING_FILE: &str = "reordering-table.txt";
pub const WEIGHTS_FILE: &str = "weights.txt";
pub const DECODER_FILE: &str = "decoder.conf";
pub const LM_FILE: &str = "lm.arpa";

/// Phrase table, optional reordering model, target-side language model,
/// weights and decoder settings.
#[derive(Debug, Clone)]
pub struct System {
    pub table: Arc<PhraseTable>,
    pub reordering: Option<Arc<ReorderingModel>>,
    pub lm: Arc<LanguageModel>,
    pub weights: LogLinearWeights,
    pub config: DecoderConfig,
}

impl System {
    pub fn new(table: PhraseTable, lm: Arc<LanguageModel>, config: DecoderConfig) -> Self {
        System {
            table: Arc::new(table),
            reordering: None,
            lm,
            weights: LogLinearWeights::defaults(),
            config,
        }
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder::new(
            &self.table,
            self.reordering.as_deref(),
            &self.lm,
            &self.weights,
            &self.config,
        )
    }

    pub fn has_reordering(&self) -> bool {
        self.reordering.is_some()
    }

    pub fn with_weights(&self, weights: LogLinearWeights) -> System {
        System {
            weights,
            ..self.clone()
        }
    }

    pub fn with_config(&self, config: DecoderConfig) -> System {
        System {
            config,
            ..self.clone()
        }
    }

    pub fn translate_corpus<S: AsRef<str> + Sync>(&self, corpus: &[Vec<S>]) -> Vec<Vec<String>> {
        self.decoder()
            .translate_corpus(corpus)
            .into_iter()
            .map(|h| h.tokens)
            .collect()
    }

    /// Writes the system into `dir`, including its language model.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.table.save(&dir.join(TABLE_FILE))?;
        let reo = dir.join(REORDERING_FILE);
        match &self.reordering {
            Some(r) => r.save(&reo)?,
            None if reo.exists() => std::fs::remove_file(&reo).map_err(|e| Error::io(&reo, e))?,
            None => {}
        }
        self.weights.save(&dir.join(WEIGHTS_FILE))?;
        save_decoder_config(&self.config, &dir.join(DECODER_FILE))?;
        self.lm.save_arpa(&dir.join(LM_FILE))
    }

    /// Loads a system written by [`System::save`]. A missing decoder file
    /// means default settings; `lm` overrides the stored language model.
    pub fn load(dir: &Path, lm: Option<Arc<LanguageModel>>) -> Result<Self> {
        let table_path = dir.join(TABLE_FILE);
        if !table_path.exists() {
            return Err(Error::MissingPath(table_path));
        }
        let reo = dir.join(REORDERING_FILE);
        let conf = dir.join(DECODER_FILE);
        let lm = match lm {
            Some(lm) => lm,
            None => Arc::new(LanguageModel::load_arpa(&dir.join(LM_FILE))?),
        };
        Ok(System {
            table: Arc::new(PhraseTable::load(&table_path)?),
            reordering: if reo.exists() {
                Some(Arc::new(ReorderingModel::load(&reo)?))
            } else {
                None
            },
            lm,
            weights: LogLinearWeights::load(&dir.join(WEIGHTS_FILE))?,
            config: if conf.exists() {
                load_decoder_config(&conf)?
            } else {
                DecoderConfig::default()
            },
        })
    }
}

pub fn save_decoder_config(config: &DecoderConfig, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let unk = match config.unk {
        UnkHandling::Copy => "copy",
        UnkHandling::Drop => "drop",
    };
    write!(
        w,
        "beam_size={}\ndistortion_limit={}\nmax_phrase_len={}\nnbest={}\nmax_options={}\nunk={unk}\n",
        config.beam_size, config.distortion_limit, config.max_phrase_len, config.nbest, config.max_options
    )
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(path, e))
}

pub fn load_decoder_config(path: &Path) -> Result<DecoderConfig> {
    let what = path.display().to_string();
    let mut config = DecoderConfig::default();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(&what, i + 1, "expected key=value"))?;
        let num = || {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(&what, i + 1, format!("bad value for `{key}`")))
        };
        match key.trim() {
            "beam_size" => config.beam_size = num()?,
            "distortion_limit" => config.distortion_limit = num()?,
            "max_phrase_len" => config.max_phrase_len = num()?,
            "nbest" => config.nbest = num()?,
            "max_options" => config.max_options = num()?,
            "unk" => {
                config.unk = match value.trim() {
                    "copy" => UnkHandling::Copy,
                    "drop" => UnkHandling::Drop,
                    other => return Err(Error::parse(&what, i + 1, format!("unknown unk mode `{other}`"))),
                }
            }
            other => return Err(Error::parse(&what, i + 1, format!("unknown key `{other}`"))),
        }
    }
    config.validate()?;
    Ok(config)
}

//! Unsupervised phrase-based statistical machine translation.
//!
//! The crate learns two translation systems in opposite directions from a
//! pair of monolingual corpora:
//!
//! 1. [`corpus`] tokenizes text and builds frequency-capped n-gram inventories.
//! 2. [`embeddings`] trains skip-gram phrase embeddings per language.
//! 3. [`crossmap`] maps both spaces into a shared space by self-learning.
//! 4. [`phrase_induction`] turns the shared space into a scored phrase table.
//! 5. [`ngram_lm`] provides modified Kneser-Ney language models.
//! 6. [`decoder`] searches the log-linear model and produces n-best lists.
//! 7. [`tuning`] adjusts the log-linear weights without parallel data.
//! 8. [`refine`] re-estimates both tables from dual synthetic corpora.
//!
//! [`schedule`] holds the SMT to NMT back-translation mixing schedule and
//! [`pipeline`] chains every stage with artifact persistence.

pub mod bleu;
pub mod cipher;
pub mod corpus;
pub mod crossmap;
pub mod decoder;
pub mod embeddings;
mod error;
pub mod ngram_lm;
pub mod phrase;
pub mod phrase_induction;
pub mod phrase_table;
pub mod pipeline;
pub mod refine;
pub mod schedule;
pub mod system;
pub mod tuning;

pub use error::{Error, Result};
pub use phrase::{Phrase, Sentence};

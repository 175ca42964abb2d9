use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use monoses::bleu::{corpus_bleu_of, Smoothing};
use monoses::cipher::{generate_cipher_corpora, run_cipher_experiment, CipherConfig, ExperimentSettings};
use monoses::corpus::{build_ngram_inventory, prepare_corpus, read_corpus, read_lines, write_corpus, InventoryCaps, PhraseInventory};
use monoses::crossmap::{normalize_embeddings, self_learn, Retrieval, SelfLearnConfig};
use monoses::decoder::{write_nbest, DecoderConfig, LogLinearWeights};
use monoses::embeddings::{train_phrase_embeddings, EmbeddingSpace, SgnsConfig};
use monoses::ngram_lm::{LanguageModel, LmConfig};
use monoses::phrase_induction::{build_initial_phrase_table, InductionConfig};
use monoses::phrase_table::{PhraseTable, ReorderingModel};
use monoses::pipeline::{run_pipeline, sample_non_empty, PipelineConfig};
use monoses::refine::{refine_loop, RefineConfig};
use monoses::schedule::backtranslation_mix;
use monoses::system::System;
use monoses::tuning::{alternating_tune, LossBreakdown, TuneConfig};
use monoses::Error;

#[derive(Parser)]
#[command(name = "monoses-kit", version, about = "Unsupervised phrase-based machine translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenization, truecasing and n-gram inventories.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Phrase embeddings.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Map two embedding spaces into a shared space.
    Map(MapArgs),
    /// Build a phrase table from mapped embeddings.
    Induce(InduceArgs),
    /// Kneser-Ney language models.
    #[command(subcommand)]
    Lm(LmCmd),
    /// Decode a tokenized input file.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file.
    Bleu(BleuArgs),
    /// Tune both systems without parallel data.
    Tune(TuneArgs),
    /// Re-estimate both systems from synthetic parallel corpora.
    Refine(RefineArgs),
    /// Back-translation mix for one iteration.
    Schedule(ScheduleArgs),
    /// Synthetic substitution-cipher benchmark.
    #[command(subcommand)]
    Cipher(CipherCmd),
    /// Run the whole pipeline with artifact persistence.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Prep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        truecase_model: PathBuf,
    },
    Inventory {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        max_uni: usize,
        #[arg(long, default_value_t = 400_000)]
        max_bi: usize,
        #[arg(long, default_value_t = 400_000)]
        max_tri: usize,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        #[arg(long, default_value_t = 300)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Single worker, bit-reproducible output.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 10)]
        negatives: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-5)]
        subsample: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out_src: PathBuf,
    #[arg(long)]
    out_tgt: PathBuf,
    #[arg(long, default_value = "cosine")]
    retrieval: String,
    #[arg(long, default_value_t = 20_000)]
    vocab: usize,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    /// Also write the final induced dictionary.
    #[arg(long)]
    dictionary: Option<PathBuf>,
}

#[derive(Args)]
struct InduceArgs {
    #[arg(long)]
    src_emb: PathBuf,
    #[arg(long)]
    tgt_emb: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long)]
    max_phrases: Option<usize>,
}

#[derive(Subcommand)]
enum LmCmd {
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// log10 probability of every line.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-word entropy in bits.
    Entropy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct DecoderArgs {
    #[arg(long, default_value_t = 100)]
    beam: usize,
    #[arg(long, default_value_t = 6)]
    distortion_limit: usize,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    /// Default weights when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    reordering: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Print an n-best list instead of the 1-best output.
    #[arg(long)]
    nbest: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    decoder: DecoderArgs,
}

#[derive(Args)]
struct BleuArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Add-one smoothing for n > 1.
    #[arg(long)]
    smooth: bool,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    table_ef: PathBuf,
    #[arg(long)]
    table_fe: PathBuf,
    #[arg(long)]
    lm_e: PathBuf,
    #[arg(long)]
    lm_f: PathBuf,
    #[arg(long)]
    sample_e: PathBuf,
    #[arg(long)]
    sample_f: PathBuf,
    #[arg(long)]
    out_ef: PathBuf,
    #[arg(long)]
    out_fe: PathBuf,
    #[arg(long, default_value_t = 100)]
    nbest: usize,
    #[arg(long, default_value_t = 4)]
    rounds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[command(flatten)]
    decoder: DecoderArgs,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    system_ef: PathBuf,
    #[arg(long)]
    system_fe: PathBuf,
    #[arg(long)]
    mono_e: PathBuf,
    #[arg(long)]
    mono_f: PathBuf,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 10_000_000)]
    cap: usize,
    /// Sentences drawn from each corpus for retuning.
    #[arg(long, default_value_t = 2000)]
    tune_sample: usize,
    #[arg(long)]
    out_ef: PathBuf,
    #[arg(long)]
    out_fe: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    t: u64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    a: u64,
}

#[derive(Subcommand)]
enum CipherCmd {
    /// Write mono.e, mono.f, test.e, test.f and lexicon.tsv.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        sentences: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate in memory and run every stage, printing the metrics.
    Run {
        #[arg(long, default_value_t = 50_000)]
        sentences: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this stage.
        #[arg(long)]
        stage: Option<String>,
        /// Override a configuration key; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print a configuration file with every key at its default.
    DefaultConfig,
}

fn system_from_files(table: &Path, lm: &Path, config: DecoderConfig) -> anyhow::Result<System> {
    let lm = Arc::new(LanguageModel::load_arpa(lm)?);
    Ok(System::new(PhraseTable::load(table)?, lm, config))
}

fn decoder_config(args: &DecoderArgs) -> DecoderConfig {
    DecoderConfig {
        beam_size: args.beam,
        distortion_limit: args.distortion_limit,
        ..Default::default()
    }
}

fn out_writer(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Corpus(CorpusCmd::Prep {
            input,
            output,
            truecase_model,
        }) => {
            let (corpus, model) = prepare_corpus(&read_lines(&input)?);
            write_corpus(&output, &corpus)?;
            model.save(&truecase_model)?;
            log::info!("{} sentences, {} truecase entries", corpus.len(), model.len());
        }
        Command::Corpus(CorpusCmd::Inventory {
            input,
            output,
            max_uni,
            max_bi,
            max_tri,
        }) => {
            let inv = build_ngram_inventory(&read_corpus(&input)?, InventoryCaps::new(max_uni, max_bi, max_tri));
            inv.save(&output)?;
            log::info!("{} phrases", inv.len());
        }
        Command::Embed(EmbedCmd::Train {
            corpus,
            inventory,
            dim,
            out,
            deterministic,
            window,
            negatives,
            epochs,
            subsample,
            seed,
            jobs,
        }) => {
            let config = SgnsConfig {
                dimension: dim,
                window,
                negatives,
                epochs,
                subsample,
                seed,
                threads: if deterministic { 1 } else { jobs },
                ..Default::default()
            };
            let space = train_phrase_embeddings(&read_corpus(&corpus)?, &PhraseInventory::load(&inventory)?, &config)?;
            space.save(&out)?;
        }
        Command::Map(a) => {
            let config = SelfLearnConfig {
                retrieval: a.retrieval.parse::<Retrieval>()?,
                vocab_cutoff: a.vocab,
                max_iters: a.max_iters,
                ..Default::default()
            };
            let src = normalize_embeddings(&EmbeddingSpace::load(&a.src)?)?;
            let tgt = normalize_embeddings(&EmbeddingSpace::load(&a.tgt)?)?;
            let result = self_learn(&src, &tgt, &config)?;
            log::info!(
                "{} iterations, {} dictionary pairs",
                result.iterations,
                result.dictionary.len()
            );
            result.map_src(&src).save(&a.out_src)?;
            result.map_tgt(&tgt).save(&a.out_tgt)?;
            if let Some(path) = a.dictionary {
                let mut w = out_writer(Some(&path))?;
                for (s, t) in result.dictionary.pairs() {
                    writeln!(w, "{s}\t{t}")?;
                }
                w.flush()?;
            }
        }
        Command::Induce(a) => {
            let config = InductionConfig {
                k: a.k,
                epsilon: a.epsilon,
                max_phrases: a.max_phrases.unwrap_or(usize::MAX),
            };
            let induced = build_initial_phrase_table(&EmbeddingSpace::load(&a.src_emb)?, &EmbeddingSpace::load(&a.tgt_emb)?, &config)?;
            log::info!(
                "{} entries, temperatures {:.4}/{:.4}",
                induced.table.len(),
                induced.tau_fwd,
                induced.tau_bwd
            );
            induced.table.save(&a.out)?;
        }
        Command::Lm(LmCmd::Train { corpus, order, out }) => {
            let config = LmConfig {
                order,
                ..Default::default()
            };
            LanguageModel::train(&read_corpus(&corpus)?, &config)?.save_arpa(&out)?;
        }
        Command::Lm(LmCmd::Score { model, input }) => {
            let lm = LanguageModel::load_arpa(&model)?;
            let mut w = out_writer(None)?;
            for s in read_corpus(&input)? {
                writeln!(w, "{:.6}", lm.lm_logprob(&s))?;
            }
            w.flush()?;
        }
        Command::Lm(LmCmd::Entropy { model, input }) => {
            let lm = LanguageModel::load_arpa(&model)?;
            println!("{:.6}", lm.per_word_entropy(&read_corpus(&input)?)?);
        }
        Command::Translate(a) => {
            let mut system = system_from_files(&a.table, &a.lm, decoder_config(&a.decoder))?;
            if let Some(p) = &a.weights {
                system.weights = LogLinearWeights::load(p)?;
            }
            if let Some(p) = &a.reordering {
                system.reordering = Some(Arc::new(ReorderingModel::load(p)?));
            }
            let input = read_corpus(&a.input)?;
            let mut w = out_writer(a.output.as_deref())?;
            match a.nbest {
                Some(n) => {
                    let lists = system.decoder().nbest_corpus(&input, n);
                    for (i, hyps) in lists.iter().enumerate() {
                        write_nbest(&mut w, i, hyps)?;
                    }
                }
                None => {
                    for h in system.translate_corpus(&input) {
                        writeln!(w, "{}", h.join(" "))?;
                    }
                }
            }
            w.flush()?;
        }
        Command::Bleu(a) => {
            let hyps = read_corpus(&a.hyp)?;
            let refs = read_corpus(&a.reference)?;
            if hyps.len() != refs.len() {
                return Err(Error::LineCountMismatch {
                    left: a.hyp.display().to_string(),
                    left_lines: hyps.len(),
                    right: a.reference.display().to_string(),
                    right_lines: refs.len(),
                }
                .into());
            }
            let smoothing = if a.smooth { Smoothing::PlusOneHigherOrders } else { Smoothing::None };
            println!("{:.4}", corpus_bleu_of(&hyps, &refs, smoothing)?);
        }
        Command::Tune(a) => {
            let dc = DecoderConfig {
                nbest: a.nbest,
                ..decoder_config(&a.decoder)
            };
            let ef = system_from_files(&a.table_ef, &a.lm_f, dc.clone())?;
            let fe = system_from_files(&a.table_fe, &a.lm_e, dc)?;
            let config = TuneConfig {
                nbest: a.nbest,
                rounds: a.rounds,
                seed: a.seed,
                ..Default::default()
            };
            let result = alternating_tune(&ef, &fe, &read_corpus(&a.sample_e)?, &read_corpus(&a.sample_f)?, &config)?;
            log::info!("loss {:.6} -> {:.6}", result.initial.total, result.final_loss().total);
            result.weights_ef.save(&a.out_ef)?;
            result.weights_fe.save(&a.out_fe)?;
            if let Some(path) = a.loss_log {
                let mut w = out_writer(Some(&path))?;
                writeln!(w, "step\ttuned\t{}", LossBreakdown::TSV_HEADER)?;
                writeln!(w, "0\t-\t{}", result.initial.to_tsv())?;
                for (i, h) in result.half_rounds.iter().enumerate() {
                    writeln!(w, "{}\t{}\t{}", i + 1, h.direction, h.breakdown.to_tsv())?;
                }
                w.flush()?;
            }
        }
        Command::Refine(a) => {
            let ef = System::load(&a.system_ef, None)?;
            let fe = System::load(&a.system_fe, None)?;
            let mono_e = read_corpus(&a.mono_e)?;
            let mono_f = read_corpus(&a.mono_f)?;
            let se = sample_non_empty(&mono_e, a.tune_sample, a.seed);
            let sf = sample_non_empty(&mono_f, a.tune_sample, a.seed.wrapping_add(1));
            let config = RefineConfig {
                iterations: a.iterations,
                cap: a.cap,
                tune: TuneConfig {
                    seed: a.seed,
                    ..Default::default()
                },
                ..Default::default()
            };
            let outcome = refine_loop(&ef, &fe, &mono_e, &mono_f, (&se, &sf), &config)?;
            for it in &outcome.iterations {
                log::info!(
                    "iteration {}: {}+{} synthetic pairs, tables {}/{}",
                    it.iteration,
                    it.synthetic_pairs.0,
                    it.synthetic_pairs.1,
                    it.table_sizes.0,
                    it.table_sizes.1
                );
            }
            outcome.system_ef.save(&a.out_ef)?;
            outcome.system_fe.save(&a.out_fe)?;
        }
        Command::Schedule(a) => {
            let mix = backtranslation_mix(a.t, a.n, a.a)?;
            println!("{}\t{}\t{}", mix.n_smt, mix.n_nmt_greedy, mix.n_nmt_sampled);
        }
        Command::Cipher(CipherCmd::Generate { out, sentences, seed }) => {
            let corpora = generate_cipher_corpora(&CipherConfig {
                sentences,
                seed,
                ..Default::default()
            })?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_corpus(&out.join("mono.e"), &corpora.mono_e)?;
            write_corpus(&out.join("mono.f"), &corpora.mono_f)?;
            write_corpus(&out.join("test.e"), &corpora.test_e)?;
            write_corpus(&out.join("test.f"), &corpora.test_f)?;
            let mut w = out_writer(Some(&out.join("lexicon.tsv")))?;
            for (e, f) in corpora.lexicon(200) {
                writeln!(w, "{e}\t{f}")?;
            }
            w.flush()?;
        }
        Command::Cipher(CipherCmd::Run { sentences, seed }) => {
            let corpora = generate_cipher_corpora(&CipherConfig {
                sentences,
                seed,
                ..Default::default()
            })?;
            let r = run_cipher_experiment(&corpora, &ExperimentSettings::default())?;
            println!("mapping_p_at_1\t{:.4}", r.mapping_p_at_1);
            println!("table_top1_accuracy\t{:.4}", r.table_top1_accuracy);
            println!("loss_at_defaults\t{:.6}", r.loss_at_defaults.total);
            println!("loss_after_tuning\t{:.6}", r.loss_after_tuning.total);
            println!("tuning_reduction\t{:.4}", r.tuning_reduction());
            println!("accepted_steps\t{}", r.accepted_steps);
            println!("loss_increasing_steps\t{}", r.loss_increasing_steps);
            println!("initial_bleu\t{:.4}", r.initial_bleu);
            println!("refined_bleu\t{:.4}", r.refined_bleu);
            println!("refined_entries\t{}", r.refined_entries);
            println!("membership_violations\t{}", r.membership_violations);
            for (stage, secs) in &r.timings {
                println!("seconds_{stage}\t{secs:.1}");
            }
        }
        Command::Pipeline(PipelineCmd::Run {
            config,
            stage,
            overrides,
        }) => {
            let mut pc = PipelineConfig::from_file(&config)?;
            for o in &overrides {
                let Some((k, v)) = o.split_once('=') else {
                    bail!(Error::InvalidArgument(format!("override `{o}` is not KEY=VALUE")));
                };
                pc.set(k, v)?;
            }
            let summary = run_pipeline(&pc, stage.as_deref())?;
            println!("executed\t{}", summary.executed.join(","));
            println!("skipped\t{}", summary.skipped.join(","));
            if let Some(report) = summary.report {
                println!("{report}");
            }
        }
        Command::Pipeline(PipelineCmd::DefaultConfig) => {
            print!("{}", PipelineConfig::default().to_text());
        }
    }
    Ok(())
}

/// 1 for bad input or configuration, 2 when a computation fails.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Stage { .. }) => 2,
        Some(
            Error::InvalidArgument(_) | Error::MissingPath(_) | Error::Parse { .. } | Error::LineCountMismatch { .. },
        ) => 1,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap_or_default();
            let stage = record.target().rsplit("::").next().unwrap_or("main");
            writeln!(
                buf,
                "{}.{:03}\t{stage}\t{}",
                ts.as_secs(),
                ts.subsec_millis(),
                record.args()
            )
        })
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `convdr` command line. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use convdr_core::model::Pooling;
use convdr_core::query_type::QueryMode;
use convdr_core::sampler::SamplingMode;
use convdr_core::trainer::{full_grid, lambda_sweep_grid, loss_grid, Ablation, Variant};
use serde::Serialize;

use crate::binary::{load_checkpoint, load_store, save_checkpoint, save_store};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats::{self, read_corpus_dir, read_qrels, read_run, read_vocab, report_json, write, Split};
use crate::pipeline;
use crate::repl::Session;

#[derive(Debug, Parser)]
#[command(name = "convdr", version, about = "Context-aware conversational dense retrieval at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Flat `key = value` experiment config; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for generation, initialization and sampling; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Grid {
    /// ccl, ccl+igl, ccl+igl+gen
    Loss,
    /// Full objective, dynamic vs full-history sampling
    Sampling,
    /// Full objective, query-focused vs whole-sequence pooling
    Pooling,
    /// Every loss variant x sampling x pooling
    Full,
    /// lambda_igl x lambda_g sweep of the full objective
    Lambda,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary file from a corpus directory.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSONL, one record per step).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embed every passage into a store file.
    EmbedPassages {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Store path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve passages for every turn and write a TREC run file.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Results per query.
        #[arg(long)]
        k: Option<usize>,
        /// current, window (last 3 turns) or full.
        #[arg(long)]
        query_type: Option<QueryMode>,
        /// Run file path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run file against qrels and print the report JSON.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value = "loss")]
        grid: Grid,
        /// Runs use seeds seed, seed+1, ...
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Rows as JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss on a toy model.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Interactive multi-turn search over a store.
    Demo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus directory, for passage text and answers.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }
}

fn variants(grid: Grid, cfg: &ExperimentConfig) -> Vec<Variant> {
    match grid {
        Grid::Loss => loss_grid(),
        Grid::Sampling => [SamplingMode::Dynamic, SamplingMode::FullHistory]
            .into_iter()
            .map(|s| Variant::new(Ablation::FULL, s, Pooling::QueryFocused))
            .collect(),
        Grid::Pooling => [Pooling::QueryFocused, Pooling::FullSequence]
            .into_iter()
            .map(|p| Variant::new(Ablation::FULL, SamplingMode::Dynamic, p))
            .collect(),
        Grid::Full => full_grid(),
        Grid::Lambda => lambda_sweep_grid(&cfg.train.weights),
    }
}

#[derive(Serialize)]
struct RowRecord<'a> {
    variant: &'a str,
    seed: u64,
    report: &'a convdr_core::eval::EvalReport,
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Usage(format!("corpus directory {} does not exist", p.display())))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, out } => {
            let cfg = common.resolve()?;
            let c = pipeline::gen_corpus(&cfg)?;
            formats::write_corpus_dir(&out, &c.passages, &c.train, &c.eval)?;
            eprintln!("{} passages, {} train and {} eval conversations in {}", c.passages.len(), c.train.len(), c.eval.len(), out.display());
        }
        Command::BuildVocab { common, corpus, out } => {
            let cfg = common.resolve()?;
            require_dir(&corpus)?;
            let c = read_corpus_dir(&corpus)?;
            let vocab = pipeline::build_vocab(&c.passages, &c.train, cfg.min_count)?;
            formats::write_vocab(&out, &vocab)?;
            eprintln!("{} tokens", vocab.len());
        }
        Command::Train { common, corpus, vocab, out, log } => {
            let cfg = common.resolve()?;
            require_dir(&corpus)?;
            let c = read_corpus_dir(&corpus)?;
            let vocab = read_vocab(&vocab)?;
            let mut log_file = match &log {
                Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(Error::io(p))?)),
                None => None,
            };
            let mut log_err = None;
            let ck = pipeline::train(&c.passages, &c.train, &vocab, &cfg, &mut |s| {
                if let (Some(f), None) = (log_file.as_mut(), &log_err) {
                    if let Err(e) = writeln!(f, "{}", formats::step_json(s)) {
                        log_err = Some(e);
                    }
                }
            })?;
            if let (Some(mut f), Some(p)) = (log_file, &log) {
                match log_err {
                    Some(e) => return Err(Error::Io { path: p.clone(), source: e }),
                    None => f.flush().map_err(Error::io(p))?,
                }
            }
            save_checkpoint(&out, &ck)?;
        }
        Command::EmbedPassages { corpus, vocab, checkpoint, out } => {
            require_dir(&corpus)?;
            let c = read_corpus_dir(&corpus)?;
            let vocab = read_vocab(&vocab)?;
            let ck = load_checkpoint(&checkpoint)?;
            save_store(&out, &pipeline::embed_passages(&ck, &vocab, &c.passages)?)?;
        }
        Command::Search {
            common,
            corpus,
            split,
            vocab,
            checkpoint,
            store,
            k,
            query_type,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = query_type {
                cfg.query.mode = m;
            }
            let k = k.unwrap_or(cfg.k);
            if k == 0 {
                return Err(Error::Usage("--k must be at least 1".into()));
            }
            require_dir(&corpus)?;
            let c = read_corpus_dir(&corpus)?;
            let vocab = read_vocab(&vocab)?;
            let ck = load_checkpoint(&checkpoint)?;
            let store = load_store(&store)?;
            let run = pipeline::search(&ck, &vocab, &store, c.conversations(split), &cfg.query, k)?;
            write(&out, &formats::format_run(&run, &format!("convdr-{}", cfg.query.mode)))?;
        }
        Command::Eval { run, qrels, out } => {
            let report = pipeline::evaluate(&read_run(&run)?, &read_qrels(&qrels)?)?;
            let json = report_json(&report);
            if let Some(p) = out {
                write(&p, &json)?;
            }
            print!("{json}");
        }
        Command::Ablate {
            common,
            corpus,
            vocab,
            grid,
            seeds,
            out,
        } => {
            let cfg = common.resolve()?;
            if seeds == 0 {
                return Err(Error::Usage("--seeds must be at least 1".into()));
            }
            require_dir(&corpus)?;
            let c = read_corpus_dir(&corpus)?;
            let vocab = read_vocab(&vocab)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.train.seed + i).collect();
            let rows = pipeline::ablate(&c, &vocab, &cfg, &variants(grid, &cfg), &seeds, &mut |r| {
                eprintln!("{} seed {}: {}", r.variant.name, r.seed, r.report);
            })?;
            let records: Vec<RowRecord<'_>> = rows
                .iter()
                .map(|r| RowRecord {
                    variant: &r.variant.name,
                    seed: r.seed,
                    report: &r.report,
                })
                .collect();
            let mut json = serde_json::to_string_pretty(&records).expect("rows always serialize");
            json.push('\n');
            write(&out, &json)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
        Command::GradCheck { seed } => {
            let reports = pipeline::grad_check(seed)?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed;
                println!(
                    "{:<10} rel_error={:.3e} tolerance={:.0e} {}",
                    r.op_name,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            if !ok {
                return Err(Error::File {
                    path: "grad-check".into(),
                    message: "gradient check failed".into(),
                });
            }
        }
        Command::Demo { checkpoint, store, vocab, corpus } => {
            let ck = load_checkpoint(&checkpoint)?;
            let store = load_store(&store)?;
            let vocab = read_vocab(&vocab)?;
            if ck.params.config.vocab_size != vocab.len() {
                return Err(Error::Usage("vocabulary does not match the checkpoint".into()));
            }
            let c = match &corpus {
                Some(p) => Some(read_corpus_dir(p)?),
                None => None,
            };
            let mut session = Session::new(&ck, &vocab, &store, c.as_ref().map(|c| c.passages.as_slice()));
            let stdin = std::io::stdin();
            session.run(stdin.lock(), std::io::stdout().lock())?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

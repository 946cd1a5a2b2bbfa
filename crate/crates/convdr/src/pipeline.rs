//! Experiment stages over in-memory values. The CLI wraps each one with
//! file IO; tests call them directly.

use std::time::Instant;

use convdr_core::corpus::{generate, Conversation, Passage};
use convdr_core::eval::{evaluate_run, EvalReport, Qrels, Run};
use convdr_core::gradcheck::GradCheckReport;
use convdr_core::index::{build_store, EmbeddingStore};
use convdr_core::model::ModelConfig;
use convdr_core::query_type::{retrieve, QueryTypeConfig};
use convdr_core::tokenizer::Vocab;
use convdr_core::trainer::{self, AblationRow, Clock, StepLog, Variant};

use crate::binary::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::formats::CorpusDir;

/// Milliseconds since construction.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Generates the corpus and holds out the last `n_eval` conversations.
pub fn gen_corpus(cfg: &ExperimentConfig) -> Result<CorpusDir> {
    let corpus = generate(&cfg.gen)?;
    let (train, eval) = corpus.split(cfg.n_eval);
    Ok(CorpusDir {
        passages: corpus.passages,
        train,
        eval,
    })
}

/// Vocabulary over the passages and every text field of the training
/// conversations.
pub fn build_vocab(passages: &[Passage], train: &[Conversation], min_count: usize) -> Result<Vocab> {
    let texts = passages.iter().map(|p| p.text.as_str()).chain(
        train
            .iter()
            .flat_map(|c| c.turns.iter().flat_map(|t| [t.query.as_str(), t.response.as_str(), t.rewrite.as_str()])),
    );
    Ok(Vocab::build(texts, min_count)?)
}

pub fn model_config(cfg: &ExperimentConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

pub fn train(
    passages: &[Passage],
    train: &[Conversation],
    vocab: &Vocab,
    cfg: &ExperimentConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    let params = trainer::train(passages, train, vocab, &model_config(cfg, vocab), &cfg.train, &WallClock::new(), on_step)?;
    Ok(Checkpoint {
        params,
        pooling: cfg.train.pooling,
    })
}

pub fn embed_passages(ck: &Checkpoint, vocab: &Vocab, passages: &[Passage]) -> Result<EmbeddingStore> {
    check_vocab(ck, vocab)?;
    Ok(build_store(passages, vocab, &ck.params)?)
}

pub fn search(
    ck: &Checkpoint,
    vocab: &Vocab,
    store: &EmbeddingStore,
    conversations: &[Conversation],
    query: &QueryTypeConfig,
    k: usize,
) -> Result<Run> {
    check_vocab(ck, vocab)?;
    Ok(retrieve(&ck.params, vocab, store, conversations, query, ck.pooling, k)?)
}

pub fn evaluate(run: &Run, qrels: &Qrels) -> Result<EvalReport> {
    Ok(evaluate_run(run, qrels)?)
}

pub fn ablate(
    corpus: &CorpusDir,
    vocab: &Vocab,
    cfg: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    Ok(trainer::run_ablation_suite(
        &corpus.passages,
        &corpus.train,
        &corpus.eval,
        vocab,
        &model_config(cfg, vocab),
        &cfg.train,
        variants,
        seeds,
        on_row,
    )?)
}

pub fn grad_check(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(trainer::gradient_check_suite(seed)?)
}

fn check_vocab(ck: &Checkpoint, vocab: &Vocab) -> Result<()> {
    if ck.params.config.vocab_size != vocab.len() {
        return Err(crate::error::Error::Usage(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            ck.params.config.vocab_size
        )));
    }
    Ok(())
}

/// Tab-separated ablation table, one row per (variant, seed).
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tseed\tmrr\tndcg_at_3\thit_at_5\thit_at_20\thit_at_100\thir_at_20\thir_at_100\n");
    for r in rows {
        s.push_str(&format!("{}\t{}", r.variant.name, r.seed));
        for (_, v) in r.report.metrics() {
            s.push_str(&format!("\t{v:.4}"));
        }
        s.push('\n');
    }
    s
}

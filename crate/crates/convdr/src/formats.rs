//! Text file formats: vocabulary, JSONL corpus, TREC run and qrels, report
//! JSON and the training log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use convdr_core::corpus::{Conversation, Corpus, Passage};
use convdr_core::eval::{EvalReport, QueryId, Qrels, Run};
use convdr_core::tokenizer::Vocab;
use convdr_core::trainer::StepLog;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const TRAIN_FILE: &str = "conversations.jsonl";
pub const EVAL_FILE: &str = "eval_conversations.jsonl";
pub const EVAL_QRELS_FILE: &str = "qrels.txt";
pub const TRAIN_QRELS_FILE: &str = "train_qrels.txt";

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::io(path))
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut s = String::new();
    for t in vocab.tokens() {
        s.push_str(t);
        s.push('\n');
    }
    write(path, &s)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read(path)?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Ok(Vocab::from_tokens(tokens).map_err(|e| Error::file(path, e.to_string()))?)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("corpus records always serialize"));
        s.push('\n');
    }
    s
}

/// Parses one record per non-blank line; errors name the line.
pub fn from_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format_err(path, i + 1, e.to_string())))
        .collect()
}

/// A corpus directory as written by `gen-corpus`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDir {
    pub passages: Vec<Passage>,
    pub train: Vec<Conversation>,
    pub eval: Vec<Conversation>,
}

impl CorpusDir {
    pub fn conversations(&self, split: Split) -> &[Conversation] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

pub fn write_corpus_dir(dir: &Path, passages: &[Passage], train: &[Conversation], eval: &[Conversation]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write(&dir.join(PASSAGES_FILE), &to_jsonl(passages))?;
    write(&dir.join(TRAIN_FILE), &to_jsonl(train))?;
    write(&dir.join(EVAL_FILE), &to_jsonl(eval))?;
    write(&dir.join(EVAL_QRELS_FILE), &format_qrels(&convdr_core::eval::qrels_from_conversations(eval)))?;
    write(&dir.join(TRAIN_QRELS_FILE), &format_qrels(&convdr_core::eval::qrels_from_conversations(train)))
}

/// Loads passages and one conversation file, checking every corpus
/// invariant (unique ids, non-empty text and gold sets, no dangling ids).
pub fn load_and_validate(passages_path: &Path, conversations_path: &Path) -> Result<Corpus> {
    let passages: Vec<Passage> = from_jsonl(passages_path, &read(passages_path)?)?;
    let conversations: Vec<Conversation> = from_jsonl(conversations_path, &read(conversations_path)?)?;
    let corpus = Corpus { passages, conversations };
    corpus.validate().map_err(|e| Error::file(conversations_path, e.to_string()))?;
    Ok(corpus)
}

pub fn read_corpus_dir(dir: &Path) -> Result<CorpusDir> {
    let p = dir.join(PASSAGES_FILE);
    let train = load_and_validate(&p, &dir.join(TRAIN_FILE))?;
    let eval = load_and_validate(&p, &dir.join(EVAL_FILE))?;
    Ok(CorpusDir {
        passages: train.passages,
        train: train.conversations,
        eval: eval.conversations,
    })
}

/// `conversation_id:turn Q0 passage_id rank score tag`, queries in id order.
pub fn format_run(run: &Run, tag: &str) -> String {
    let mut s = String::new();
    for (q, list) in run {
        for (rank, (pid, score)) in list.iter().enumerate() {
            let _ = writeln!(s, "{q} Q0 {pid} {} {score} {tag}", rank + 1);
        }
    }
    s
}

pub fn parse_run(path: &Path, text: &str) -> Result<Run> {
    let mut run: BTreeMap<QueryId, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |m: String| format_err(path, i + 1, m);
        if f.len() != 6 || f[1] != "Q0" {
            return Err(err("expected: query_id Q0 passage_id rank score tag".into()));
        }
        let q: QueryId = f[0].parse().map_err(|e: convdr_core::error::Error| err(e.to_string()))?;
        let rank: usize = f[3].parse().map_err(|_| err(format!("invalid rank {:?}", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| err(format!("invalid score {:?}", f[4])))?;
        if rank == 0 || !score.is_finite() {
            return Err(err("rank must be at least 1 and score finite".into()));
        }
        run.entry(q).or_default().push((rank, f[2].to_string(), score));
    }
    run.into_iter()
        .map(|(q, mut list)| {
            list.sort_by_key(|x| x.0);
            let mut seen = BTreeSet::new();
            for (k, (rank, pid, _)) in list.iter().enumerate() {
                if *rank != k + 1 || !seen.insert(pid.as_str()) {
                    return Err(Error::file(path, format!("query {q}: ranks must be 1..n over distinct passages")));
                }
            }
            Ok((q, list.into_iter().map(|(_, p, s)| (p, s)).collect()))
        })
        .collect()
}

pub fn read_run(path: &Path) -> Result<Run> {
    parse_run(path, &read(path)?)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut s = String::new();
    for (q, gold) in qrels {
        for pid in gold {
            let _ = writeln!(s, "{q} 0 {pid} 1");
        }
    }
    s
}

/// Lines with relevance 0 are judged non-relevant and dropped.
pub fn parse_qrels(path: &Path, text: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |m: String| format_err(path, i + 1, m);
        if f.len() != 4 {
            return Err(err("expected: query_id 0 passage_id relevance".into()));
        }
        let q: QueryId = f[0].parse().map_err(|e: convdr_core::error::Error| err(e.to_string()))?;
        let rel: u32 = f[3].parse().map_err(|_| err(format!("invalid relevance {:?}", f[3])))?;
        let gold = qrels.entry(q).or_default();
        if rel > 0 {
            gold.insert(f[2].to_string());
        }
    }
    qrels.retain(|_, g| !g.is_empty());
    Ok(qrels)
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(path, &read(path)?)
}

pub fn report_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports always serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    epoch: usize,
    l_ccl: f64,
    l_igl: f64,
    l_g: f64,
    l_total: f64,
    grad_norm: f64,
    wall_ms: u64,
}

pub fn step_json(s: &StepLog) -> String {
    serde_json::to_string(&StepRecord {
        step: s.step,
        epoch: s.epoch,
        l_ccl: s.losses.l_ccl,
        l_igl: s.losses.l_igl,
        l_g: s.losses.l_g,
        l_total: s.losses.l_total,
        grad_norm: s.grad_norm,
        wall_ms: s.wall_ms,
    })
    .expect("finite step logs always serialize")
}

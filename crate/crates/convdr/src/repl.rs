//! Interactive multi-turn search. Each line is the next user query; it is
//! encoded together with the whole session history and searched.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use convdr_core::index::EmbeddingStore;
use convdr_core::model::{embed_batch, generate_greedy};
use convdr_core::query_type::encode_fitting;
use convdr_core::tokenizer::{encode_generation_prompt, DialogueTurn, Vocab};

use crate::binary::Checkpoint;
use crate::error::{Error, Result};

pub const TOP_K: usize = 5;
const MAX_ANSWER_TOKENS: usize = 32;

pub struct Session<'a> {
    ck: &'a Checkpoint,
    vocab: &'a Vocab,
    store: &'a EmbeddingStore,
    /// Passage texts, when known, for display and answer generation.
    texts: Option<BTreeMap<&'a str, &'a str>>,
    history: Vec<(String, Option<String>)>,
}

/// What one query produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub results: Vec<(String, f64)>,
    /// Oldest turns removed to fit the context.
    pub dropped: usize,
    pub answer: Option<String>,
}

impl<'a> Session<'a> {
    pub fn new(ck: &'a Checkpoint, vocab: &'a Vocab, store: &'a EmbeddingStore, passages: Option<&'a [convdr_core::corpus::Passage]>) -> Self {
        Self {
            ck,
            vocab,
            store,
            texts: passages.map(|ps| ps.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect()),
            history: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn query(&mut self, text: &str) -> Result<Reply> {
        let ctx = self.ck.params.config.context_len;
        let mut turns: Vec<DialogueTurn<'_>> = self.history.iter().map(|(q, a)| DialogueTurn::new(q, a.as_deref())).collect();
        turns.push(DialogueTurn::new(text, None));
        let (enc, dropped) = encode_fitting(&turns, self.vocab, ctx)?;
        let emb = embed_batch(&self.ck.params, &[&enc], self.ck.pooling)?.remove(0);
        let results = self.store.search(&emb, TOP_K)?.entries;
        let answer = match (&self.texts, results.first()) {
            (Some(texts), Some((top, _))) => {
                let passage = texts.get(top.as_str()).copied().unwrap_or("");
                let prompt = encode_generation_prompt(&turns[dropped..], passage, self.vocab, ctx.saturating_sub(MAX_ANSWER_TOKENS));
                match prompt {
                    Ok(p) => Some(self.vocab.decode(&generate_greedy(&p, &self.ck.params, MAX_ANSWER_TOKENS)?)?),
                    Err(_) => None,
                }
            }
            _ => None,
        };
        self.history.drain(..dropped.min(self.history.len()));
        self.history.push((text.to_string(), answer.clone().filter(|a| !a.is_empty())));
        Ok(Reply { results, dropped, answer })
    }

    /// Reads queries until `:quit` or end of input.
    pub fn run<R: BufRead, W: Write>(&mut self, input: R, mut out: W) -> Result<()> {
        let io = |e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        };
        writeln!(out, "multi-turn search; :reset clears the history, :quit exits").map_err(io)?;
        for line in input.lines() {
            let line = line.map_err(|e| Error::Io {
                path: "<stdin>".into(),
                source: e,
            })?;
            let q = line.trim();
            match q {
                "" => continue,
                ":quit" => break,
                ":reset" => {
                    self.reset();
                    writeln!(out, "history cleared").map_err(io)?;
                    continue;
                }
                _ => {}
            }
            let reply = match self.query(q) {
                Ok(r) => r,
                Err(e) => {
                    writeln!(out, "error: {e}").map_err(io)?;
                    continue;
                }
            };
            if reply.dropped > 0 {
                writeln!(out, "note: dropped {} oldest turn(s) to fit the context", reply.dropped).map_err(io)?;
            }
            for (rank, (id, score)) in reply.results.iter().enumerate() {
                let text = self.texts.as_ref().and_then(|t| t.get(id.as_str())).copied().unwrap_or("");
                writeln!(out, "{:>2}. {id} {score:.4} {text}", rank + 1).map_err(io)?;
            }
            if let Some(a) = reply.answer.as_ref().filter(|a| !a.is_empty()) {
                writeln!(out, "answer: {a}").map_err(io)?;
            }
        }
        Ok(())
    }
}

//! Query-input strategies at embedding time: the current query alone, a
//! window of recent turns, or the full history.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::corpus::Conversation;
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_run, qrels_from_conversations, EvalReport, QueryId, Run};
use crate::index::EmbeddingStore;
use crate::model::{embed_batch, ModelParams, Pooling};
use crate::sampler::window;
use crate::tensor::Scalar;
use crate::tokenizer::{encode_conversation, DialogueTurn, EncodedDialogue, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QueryMode {
    Current,
    Window,
    #[default]
    Full,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::Current, QueryMode::Window, QueryMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Current => "current",
            QueryMode::Window => "window",
            QueryMode::Full => "full",
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid!("unknown query type {s:?}; expected current, window or full"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryTypeConfig {
    pub mode: QueryMode,
    /// History turns kept in window mode.
    pub window_turns: usize,
}

impl Default for QueryTypeConfig {
    fn default() -> Self {
        Self {
            mode: QueryMode::Full,
            window_turns: 3,
        }
    }
}

impl QueryTypeConfig {
    pub fn new(mode: QueryMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_turns == 0 {
            return Err(Error::Config("window_turns must be at least 1".into()));
        }
        Ok(())
    }
}

/// Turns fed to the encoder for target turn `n` (1-based).
pub fn build_query_input<'c>(conversation: &'c Conversation, n: usize, config: &QueryTypeConfig) -> Vec<DialogueTurn<'c>> {
    let start = match config.mode {
        QueryMode::Current => n,
        QueryMode::Window => n.saturating_sub(config.window_turns).max(1),
        QueryMode::Full => 1,
    };
    window(conversation, start, n)
}

/// Encodes `turns`, dropping the oldest turns until the result fits.
pub fn encode_fitting(turns: &[DialogueTurn<'_>], vocab: &Vocab, context_len: usize) -> Result<(EncodedDialogue, usize)> {
    for drop in 0..turns.len() {
        match encode_conversation(&turns[drop..], vocab, context_len) {
            Ok(d) => return Ok((d, drop)),
            Err(Error::ContextOverflow { .. }) if drop + 1 < turns.len() => continue,
            Err(e) => return Err(e),
        }
    }
    Err(invalid!("no turns to encode"))
}

/// Encoded query input for every turn of every conversation, keyed by query
/// id in conversation then turn order.
pub fn encode_queries(
    conversations: &[Conversation],
    vocab: &Vocab,
    context_len: usize,
    config: &QueryTypeConfig,
) -> Result<Vec<(QueryId, EncodedDialogue)>> {
    config.validate()?;
    let mut out = Vec::new();
    for c in conversations {
        for n in 1..=c.turns.len() {
            let turns = build_query_input(c, n, config);
            let (enc, _) = encode_fitting(&turns, vocab, context_len)?;
            out.push((QueryId::new(c.id.clone(), n), enc));
        }
    }
    Ok(out)
}

/// Retrieves the top `k` passages for every turn.
pub fn retrieve<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    store: &EmbeddingStore,
    conversations: &[Conversation],
    config: &QueryTypeConfig,
    pooling: Pooling,
    k: usize,
) -> Result<Run> {
    let queries = encode_queries(conversations, vocab, params.config.context_len, config)?;
    let encoded: Vec<&EncodedDialogue> = queries.iter().map(|(_, e)| e).collect();
    let embeddings = embed_batch(params, &encoded, pooling)?;
    let mut run = Run::new();
    for ((qid, _), e) in queries.iter().zip(embeddings) {
        let e: Vec<f32> = e.into_iter().map(|v| v.as_f64() as f32).collect();
        run.insert(qid.clone(), store.search(&e, k)?.entries);
    }
    Ok(run)
}

/// One evaluation per query mode on the same conversations and qrels.
pub fn compare_query_types<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    store: &EmbeddingStore,
    conversations: &[Conversation],
    window_turns: usize,
) -> Result<Vec<(QueryMode, EvalReport)>> {
    let qrels = qrels_from_conversations(conversations);
    QueryMode::ALL
        .into_iter()
        .map(|mode| {
            let cfg = QueryTypeConfig { mode, window_turns };
            let run = retrieve(params, vocab, store, conversations, &cfg, Pooling::QueryFocused, 100)?;
            Ok((mode, evaluate_run(&run, &qrels)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use alloc::format;
    use alloc::string::String;
    use alloc::vec;

    fn conv(n: usize) -> Conversation {
        Conversation {
            id: "c".into(),
            turns: (1..=n)
                .map(|i| Turn {
                    query: format!("q{i}"),
                    response: format!("a{i}"),
                    gold_passage_ids: vec![format!("p{i}")],
                    rewrite: format!("q{i}"),
                    topic_id: 0,
                })
                .collect(),
        }
    }

    fn render(turns: &[DialogueTurn<'_>]) -> Vec<(String, Option<String>)> {
        turns.iter().map(|t| (t.query.into(), t.response.map(String::from))).collect()
    }

    #[test]
    fn first_turn_is_alone_in_every_mode() {
        let c = conv(3);
        for mode in QueryMode::ALL {
            assert_eq!(render(&build_query_input(&c, 1, &QueryTypeConfig::new(mode))), vec![("q1".into(), None)]);
        }
    }

    #[test]
    fn window_keeps_last_three_turns() {
        let c = conv(5);
        let w = render(&build_query_input(&c, 5, &QueryTypeConfig::new(QueryMode::Window)));
        let want: Vec<(String, Option<String>)> = vec![
            ("q2".into(), Some("a2".into())),
            ("q3".into(), Some("a3".into())),
            ("q4".into(), Some("a4".into())),
            ("q5".into(), None),
        ];
        assert_eq!(w, want);
        let cur = build_query_input(&c, 5, &QueryTypeConfig::new(QueryMode::Current));
        assert!(cur.iter().all(|t| t.response.is_none()));
        let full = render(&build_query_input(&c, 5, &QueryTypeConfig::new(QueryMode::Full)));
        assert_eq!(full.len(), 5);
        assert!(full.iter().enumerate().all(|(i, (q, _))| *q == format!("q{}", i + 1)));
    }

    #[test]
    fn full_equals_window_for_short_history() {
        let c = conv(4);
        let w = QueryTypeConfig::new(QueryMode::Window);
        let f = QueryTypeConfig::new(QueryMode::Full);
        assert_eq!(build_query_input(&c, 2, &w), build_query_input(&c, 2, &f));
        assert_eq!(build_query_input(&c, 4, &w), build_query_input(&c, 4, &f));
    }

    #[test]
    fn parses_mode_names() {
        assert_eq!("window".parse::<QueryMode>().unwrap(), QueryMode::Window);
        assert!("all".parse::<QueryMode>().is_err());
        assert!(QueryTypeConfig { window_turns: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fitting_drops_oldest_turns() {
        let c = conv(4);
        let vocab = Vocab::build(["q1 q2 q3 q4 a1 a2 a3 a4"], 1).unwrap();
        let turns = build_query_input(&c, 4, &QueryTypeConfig::new(QueryMode::Full));
        // full: 1 + 3*4 + 2 = 15 tokens; each dropped turn saves 4
        let (d, dropped) = encode_fitting(&turns, &vocab, 10).unwrap();
        assert_eq!(dropped, 2);
        assert!(d.total_len() <= 10);
        assert!(encode_fitting(&turns, &vocab, 2).is_err());
    }
}

//! Word-level vocabulary with dialogue role markers.
//!
//! Dialogues are laid out as `BOS, USER q1 ASSISTANT a1 … USER qn`. The
//! current-query span covers only the content tokens of `qn`, which is the
//! region pooled into the retrieval embedding.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const USER: u32 = 3;
pub const ASSISTANT: u32 = 4;
pub const PASSAGE: u32 = 5;

/// Surface forms of the special tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<|user|>", "<|assistant|>", "<|passage|>"];

/// Lowercased whitespace tokenization.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

/// Lowercases and collapses runs of whitespace into single spaces.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for w in words(text) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&w);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
}

impl Vocab {
    /// Counts words over `texts` and keeps those seen at least `min_count`
    /// times, ordered by frequency (descending) then lexicographically.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_count == 0 {
            return Err(invalid!("min_count must be at least 1"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut seen_any = false;
        for text in texts {
            for w in words(text) {
                seen_any = true;
                *counts.entry(w).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(invalid!("cannot build a vocabulary from an empty stream"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        // BTreeMap iteration is lexicographic; a stable sort by count keeps it as the tiebreak
        kept.sort_by(|a, b| b.1.cmp(&a.1));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its full id-ordered token list, which must
    /// start with the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(invalid!("vocabulary must begin with {:?}", SPECIAL_TOKENS));
        }
        let mut token_to_id = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(invalid!("token {i} is empty or contains whitespace"));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(invalid!("duplicate token {t:?}"));
            }
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of an already-lowercased word, or `UNK`.
    pub fn id(&self, word: &str) -> u32 {
        self.token_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.id(&w)).collect()
    }

    /// Renders ids as space-separated words. `BOS` and `PAD` render as
    /// nothing; other specials render as their markers.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange(id))?;
            if id == BOS || id == PAD {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }
}

/// One dialogue turn as text; the final turn of an encoded dialogue has no
/// response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DialogueTurn<'a> {
    pub query: &'a str,
    pub response: Option<&'a str>,
}

impl<'a> DialogueTurn<'a> {
    pub fn new(query: &'a str, response: Option<&'a str>) -> Self {
        Self { query, response }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDialogue {
    pub ids: Vec<u32>,
    /// Half-open token range of the current query's content tokens.
    pub current_query_span: (usize, usize),
}

impl EncodedDialogue {
    /// Total encoded length, markers included.
    pub fn total_len(&self) -> usize {
        self.ids.len()
    }

    /// Content-token length of the current query.
    pub fn query_len(&self) -> usize {
        self.current_query_span.1 - self.current_query_span.0
    }
}

// history turns may lack a response (interactive sessions)
fn push_turns(ids: &mut Vec<u32>, history: &[DialogueTurn<'_>], vocab: &Vocab) {
    for turn in history {
        ids.push(USER);
        ids.extend(vocab.encode_text(turn.query));
        if let Some(r) = turn.response {
            ids.push(ASSISTANT);
            ids.extend(vocab.encode_text(r));
        }
    }
}

fn check_len(len: usize, max_len: usize) -> Result<()> {
    if len > max_len {
        return Err(Error::ContextOverflow { len, max: max_len });
    }
    Ok(())
}

/// Encodes `[q_i, a_i, …, q_n]`; the last turn must carry no response.
pub fn encode_conversation(turns: &[DialogueTurn<'_>], vocab: &Vocab, max_len: usize) -> Result<EncodedDialogue> {
    let (last, history) = turns.split_last().ok_or_else(|| invalid!("conversation has no turns"))?;
    if last.response.is_some() {
        return Err(invalid!("the current turn must be a query without a response"));
    }
    let mut ids = Vec::new();
    ids.push(BOS);
    push_turns(&mut ids, history, vocab);
    ids.push(USER);
    let start = ids.len();
    ids.extend(vocab.encode_text(last.query));
    if ids.len() == start {
        return Err(invalid!("current query has no tokens"));
    }
    check_len(ids.len(), max_len)?;
    let end = ids.len();
    Ok(EncodedDialogue {
        ids,
        current_query_span: (start, end),
    })
}

/// Encodes a passage as `BOS, PASSAGE, tokens`; the span covers the tokens.
pub fn encode_passage(text: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedDialogue> {
    let mut ids = alloc::vec![BOS, PASSAGE];
    ids.extend(vocab.encode_text(text));
    if ids.len() == 2 {
        return Err(invalid!("passage has no tokens"));
    }
    check_len(ids.len(), max_len)?;
    let end = ids.len();
    Ok(EncodedDialogue {
        ids,
        current_query_span: (2, end),
    })
}

/// Generation prompt `BOS, USER q_i … USER q_n, PASSAGE p, ASSISTANT`; the
/// model continues with the response.
pub fn encode_generation_prompt(
    turns: &[DialogueTurn<'_>],
    passage: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<u32>> {
    let d = encode_conversation(turns, vocab, usize::MAX)?;
    let mut ids = d.ids;
    ids.push(PASSAGE);
    ids.extend(vocab.encode_text(passage));
    ids.push(ASSISTANT);
    check_len(ids.len(), max_len)?;
    Ok(ids)
}

/// Teacher-forcing sequence `[q_i, a_i, …, q_n, p_n, a_n]` with a mask that
/// is true exactly on the response tokens.
pub fn encode_generation(
    turns: &[DialogueTurn<'_>],
    passage: &str,
    response: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<(Vec<u32>, Vec<bool>)> {
    let mut ids = encode_generation_prompt(turns, passage, vocab, usize::MAX)?;
    let start = ids.len();
    ids.extend(vocab.encode_text(response));
    if ids.len() == start {
        return Err(invalid!("response has no tokens"));
    }
    check_len(ids.len(), max_len)?;
    let mask = (0..ids.len()).map(|i| i >= start).collect();
    Ok((ids, mask))
}

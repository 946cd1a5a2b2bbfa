//! Ranking metrics, historical interference and lexical answer matching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::corpus::Conversation;
use crate::error::{invalid, Error, Result};
use crate::tokenizer::normalize_text;

/// `conversation_id:turn`, turns counted from 1.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId {
    pub conversation_id: String,
    pub turn: usize,
}

impl QueryId {
    pub fn new(conversation_id: impl Into<String>, turn: usize) -> Self {
        Self {
            conversation_id: conversation_id.into(),
            turn,
        }
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.conversation_id, self.turn)
    }
}

impl FromStr for QueryId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, t) = s.rsplit_once(':').ok_or_else(|| invalid!("query id {s:?} lacks ':turn'"))?;
        let turn: usize = t.parse().map_err(|_| invalid!("query id {s:?} has a non-numeric turn"))?;
        if c.is_empty() || turn == 0 {
            return Err(invalid!("query id {s:?} must be conversation:turn with turn >= 1"));
        }
        Ok(Self::new(c, turn))
    }
}

/// Ranked passages per query, best first.
pub type Run = BTreeMap<QueryId, Vec<(String, f64)>>;
/// Gold passages per query.
pub type Qrels = BTreeMap<QueryId, BTreeSet<String>>;

/// Qrels of every turn of `conversations`.
pub fn qrels_from_conversations(conversations: &[Conversation]) -> Qrels {
    conversations
        .iter()
        .flat_map(|c| {
            c.turns
                .iter()
                .enumerate()
                .map(move |(k, t)| (QueryId::new(c.id.clone(), k + 1), t.gold_passage_ids.iter().cloned().collect()))
        })
        .collect()
}

fn checked<'a>(run: &'a Run, qrels: &'a Qrels) -> Result<Vec<(&'a [(String, f64)], &'a BTreeSet<String>)>> {
    if run.is_empty() {
        return Err(invalid!("empty run"));
    }
    run.iter()
        .map(|(q, list)| {
            let gold = qrels.get(q).ok_or_else(|| Error::UnknownId(q.to_string()))?;
            if gold.is_empty() {
                return Err(invalid!("query {q} has no gold passages"));
            }
            Ok((list.as_slice(), gold))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn reciprocal_rank(list: &[(String, f64)], gold: &BTreeSet<String>, cutoff: usize) -> f64 {
    list.iter()
        .take(cutoff)
        .position(|(p, _)| gold.contains(p))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

fn ndcg(list: &[(String, f64)], gold: &BTreeSet<String>, k: usize) -> f64 {
    let disc = |j: usize| 1.0 / ((j + 2) as f64).log2();
    let dcg: f64 = list.iter().take(k).enumerate().filter(|(_, (p, _))| gold.contains(p)).map(|(j, _)| disc(j)).sum();
    let ideal: f64 = (0..gold.len().min(k)).map(disc).sum();
    dcg / ideal
}

fn hit(list: &[(String, f64)], gold: &BTreeSet<String>, k: usize) -> f64 {
    if list.iter().take(k).any(|(p, _)| gold.contains(p)) {
        1.0
    } else {
        0.0
    }
}

pub fn mrr(run: &Run, qrels: &Qrels, cutoff: usize) -> Result<f64> {
    Ok(mean(checked(run, qrels)?.into_iter().map(|(l, g)| reciprocal_rank(l, g, cutoff))))
}

/// Binary-gain nDCG@k.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    Ok(mean(checked(run, qrels)?.into_iter().map(|(l, g)| ndcg(l, g, k))))
}

pub fn hit_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    Ok(mean(checked(run, qrels)?.into_iter().map(|(l, g)| hit(l, g, k))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HirResult {
    /// Mean interference per turn index.
    pub per_turn: BTreeMap<usize, f64>,
    /// Mean over all queries.
    pub mean: f64,
}

/// Gold passages of earlier turns of the same conversation that are not gold
/// for this turn.
fn historical_only(q: &QueryId, qrels: &Qrels) -> BTreeSet<String> {
    let current = &qrels[q];
    let lo = QueryId::new(q.conversation_id.clone(), 1);
    qrels
        .range(lo..q.clone())
        .filter(|(k, _)| k.conversation_id == q.conversation_id)
        .flat_map(|(_, g)| g.iter())
        .filter(|p| !current.contains(*p))
        .cloned()
        .collect()
}

fn interference(q: &QueryId, list: &[(String, f64)], qrels: &Qrels, k: usize) -> f64 {
    let hist = historical_only(q, qrels);
    if list.iter().take(k).any(|(p, _)| hist.contains(p)) {
        1.0
    } else {
        0.0
    }
}

/// Historical interference rate: a query interferes when its top-k holds a
/// passage that was gold for an earlier turn but is not gold now.
pub fn hir_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<HirResult> {
    checked(run, qrels)?;
    let mut by_turn: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (q, list) in run {
        let v = interference(q, list, qrels, k);
        let e = by_turn.entry(q.turn).or_default();
        e.0 += v;
        e.1 += 1;
        total += v;
    }
    Ok(HirResult {
        per_turn: by_turn.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect(),
        mean: total / run.len() as f64,
    })
}

/// 1 if the normalized generation contains any normalized reference.
pub fn lexical_match(generated: &str, references: &[&str]) -> u8 {
    let g = normalize_text(generated);
    references
        .iter()
        .map(|r| normalize_text(r))
        .any(|r| !r.is_empty() && g.contains(r.as_str()))
        .into()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TurnStats {
    pub turn: usize,
    pub queries: usize,
    pub hit_at_100: f64,
    pub hir_at_20: f64,
    pub hir_at_100: f64,
}

/// Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub queries: usize,
    pub mrr: f64,
    pub ndcg_at_3: f64,
    pub hit_at_5: f64,
    pub hit_at_20: f64,
    pub hit_at_100: f64,
    pub hir_at_20: f64,
    pub hir_at_100: f64,
    pub per_turn: Vec<TurnStats>,
}

pub const MRR_CUTOFF: usize = 100;

/// Every metric in one pass over the run.
pub fn evaluate_run(run: &Run, qrels: &Qrels) -> Result<EvalReport> {
    let pairs = checked(run, qrels)?;
    let n = pairs.len() as f64;
    let mut acc = [0.0f64; 7];
    let mut turns: BTreeMap<usize, (usize, [f64; 3])> = BTreeMap::new();
    for ((q, _), (list, gold)) in run.iter().zip(pairs) {
        let h100 = hit(list, gold, 100);
        let i20 = interference(q, list, qrels, 20);
        let i100 = interference(q, list, qrels, 100);
        let vals = [
            reciprocal_rank(list, gold, MRR_CUTOFF),
            ndcg(list, gold, 3),
            hit(list, gold, 5),
            hit(list, gold, 20),
            h100,
            i20,
            i100,
        ];
        acc.iter_mut().zip(vals).for_each(|(a, v)| *a += v);
        let t = turns.entry(q.turn).or_default();
        t.0 += 1;
        t.1[0] += h100;
        t.1[1] += i20;
        t.1[2] += i100;
    }
    Ok(EvalReport {
        queries: run.len(),
        mrr: acc[0] / n,
        ndcg_at_3: acc[1] / n,
        hit_at_5: acc[2] / n,
        hit_at_20: acc[3] / n,
        hit_at_100: acc[4] / n,
        hir_at_20: acc[5] / n,
        hir_at_100: acc[6] / n,
        per_turn: turns
            .into_iter()
            .map(|(turn, (c, s))| TurnStats {
                turn,
                queries: c,
                hit_at_100: s[0] / c as f64,
                hir_at_20: s[1] / c as f64,
                hir_at_100: s[2] / c as f64,
            })
            .collect(),
    })
}

impl EvalReport {
    /// `(name, value)` of every headline metric, in report order.
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("mrr", self.mrr),
            ("ndcg_at_3", self.ndcg_at_3),
            ("hit_at_5", self.hit_at_5),
            ("hit_at_20", self.hit_at_20),
            ("hit_at_100", self.hit_at_100),
            ("hir_at_20", self.hir_at_20),
            ("hir_at_100", self.hir_at_100),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.metrics().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        write!(f, "queries={} {}", self.queries, parts.join(" "))
    }
}

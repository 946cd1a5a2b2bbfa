//! Training instances built by dynamic dialogue history sampling.
//!
//! For target turn `n > 1` a start turn `i` is drawn uniformly from
//! `1..n` and the window `[q_i, a_i, …, q_n]` becomes the model input, so
//! one conversation yields inputs of many different lengths across epochs.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Conversation, Passage};
use crate::error::{invalid, Error, Result};
use crate::tokenizer::{encode_conversation, encode_generation, DialogueTurn, EncodedDialogue, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum SamplingMode {
    /// Uniform start turn `i < n`.
    #[default]
    Dynamic,
    /// Always the whole history (`i = 1`).
    FullHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub conversation_id: String,
    /// Target turn, 1-based.
    pub turn: usize,
    /// First turn of the window, 1-based.
    pub start: usize,
    pub dialogue: EncodedDialogue,
    pub positive_id: String,
    /// Full gold set of the target turn (never used as negatives).
    pub gold_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    /// `[BOS, USER, rewrite]`, pooled over the rewrite tokens.
    pub rewrite: EncodedDialogue,
    pub gen_ids: Vec<u32>,
    pub gen_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub instances: Vec<TrainingInstance>,
    pub size: usize,
}

pub struct Sampler<'a> {
    vocab: &'a Vocab,
    passages: &'a [Passage],
    text_by_id: BTreeMap<&'a str, &'a str>,
    pub context_len: usize,
    pub k_rand: usize,
    pub mode: SamplingMode,
}

/// Turns `start..=n` (1-based) as encoder input, the last without response.
pub fn window<'c>(conversation: &'c Conversation, start: usize, n: usize) -> Vec<DialogueTurn<'c>> {
    conversation.turns[start - 1..n]
        .iter()
        .enumerate()
        .map(|(k, t)| DialogueTurn::new(&t.query, (start + k < n).then_some(t.response.as_str())))
        .collect()
}

impl<'a> Sampler<'a> {
    pub fn new(vocab: &'a Vocab, passages: &'a [Passage], context_len: usize, k_rand: usize, mode: SamplingMode) -> Self {
        let text_by_id = passages.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect();
        Self {
            vocab,
            passages,
            text_by_id,
            context_len,
            k_rand,
            mode,
        }
    }

    /// Draws the start turn for target `n` according to the sampling mode.
    pub fn draw_start(&self, n: usize, rng: &mut ChaCha8Rng) -> usize {
        match (self.mode, n) {
            (_, 0 | 1) | (SamplingMode::FullHistory, _) => 1,
            (SamplingMode::Dynamic, _) => rng.gen_range(1..n),
        }
    }

    /// Instance for target turn `n` (1-based) with a drawn start turn.
    pub fn sample_instance(&self, conversation: &Conversation, n: usize, rng: &mut ChaCha8Rng) -> Result<TrainingInstance> {
        if n == 0 || n > conversation.turns.len() {
            return Err(invalid!("turn {n} outside conversation {} of {} turns", conversation.id, conversation.turns.len()));
        }
        let i = self.draw_start(n, rng);
        self.instance_from(conversation, n, i)
    }

    /// Instance with window starting at turn `start`; if it does not fit the
    /// context, the start advances to the first turn that does.
    pub fn instance_from(&self, conversation: &Conversation, n: usize, start: usize) -> Result<TrainingInstance> {
        if n == 0 || n > conversation.turns.len() || start == 0 || start > n {
            return Err(invalid!("invalid window {start}..={n} for conversation {}", conversation.id));
        }
        let target = &conversation.turns[n - 1];
        let positive_id = target
            .gold_passage_ids
            .first()
            .ok_or_else(|| invalid!("conversation {} turn {n} has no gold passage", conversation.id))?
            .clone();
        let passage = *self
            .text_by_id
            .get(positive_id.as_str())
            .ok_or_else(|| Error::UnknownId(positive_id.clone()))?;
        let mut last_err = None;
        for i in start..=n {
            let turns = window(conversation, i, n);
            let dialogue = match encode_conversation(&turns, self.vocab, self.context_len) {
                Ok(d) => d,
                Err(e @ Error::ContextOverflow { .. }) => {
                    last_err = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (gen_ids, gen_mask) = match encode_generation(&turns, passage, &target.response, self.vocab, self.context_len) {
                Ok(x) => x,
                Err(e @ Error::ContextOverflow { .. }) => {
                    last_err = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let rewrite = encode_conversation(&[DialogueTurn::new(&target.rewrite, None)], self.vocab, self.context_len)?;
            return Ok(TrainingInstance {
                conversation_id: conversation.id.clone(),
                turn: n,
                start: i,
                dialogue,
                positive_id,
                gold_ids: target.gold_passage_ids.clone(),
                negative_ids: Vec::new(),
                rewrite,
                gen_ids,
                gen_mask,
            });
        }
        Err(last_err.unwrap_or_else(|| invalid!("no window fits")))
    }

    /// One shuffled pass over every (conversation, turn) pair, batched, with
    /// in-batch and random negatives attached.
    pub fn build_epoch(&self, conversations: &[Conversation], rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size < 2 {
            return Err(Error::Config(alloc::format!("batch_size must be at least 2, got {batch_size}")));
        }
        if self.passages.len() < self.k_rand + 1 {
            return Err(invalid!(
                "collection of {} passages cannot supply {} random negatives",
                self.passages.len(),
                self.k_rand
            ));
        }
        let mut instances = Vec::new();
        for c in conversations {
            for n in 1..=c.turns.len() {
                instances.push(self.sample_instance(c, n, rng)?);
            }
        }
        instances.shuffle(rng);
        let mut batches = Vec::new();
        let mut rest = instances;
        while !rest.is_empty() {
            let tail = rest.split_off(batch_size.min(rest.len()));
            let mut chunk = core::mem::replace(&mut rest, tail);
            self.attach_negatives(&mut chunk, rng);
            let size = chunk.len();
            batches.push(Batch { instances: chunk, size });
        }
        Ok(batches)
    }

    /// Fills every instance's negatives: other in-batch positives plus
    /// `k_rand` random passages, never from the instance's gold set.
    pub fn attach_negatives(&self, batch: &mut [TrainingInstance], rng: &mut ChaCha8Rng) {
        let positives: Vec<String> = batch.iter().map(|x| x.positive_id.clone()).collect();
        for inst in batch.iter_mut() {
            let gold: BTreeSet<&str> = inst.gold_ids.iter().map(String::as_str).collect();
            let mut seen = BTreeSet::new();
            let mut negs = Vec::new();
            for p in &positives {
                if !gold.contains(p.as_str()) && seen.insert(p.clone()) {
                    negs.push(p.clone());
                }
            }
            let mut drawn = 0;
            // rejection sampling; the collection is far larger than k_rand
            let mut attempts = 0;
            while drawn < self.k_rand && attempts < 64 * (self.k_rand + 1) {
                attempts += 1;
                let p = &self.passages[rng.gen_range(0..self.passages.len())].id;
                if !gold.contains(p.as_str()) && seen.insert(p.clone()) {
                    negs.push(p.clone());
                    drawn += 1;
                }
            }
            inst.negative_ids = negs;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GenConfig};
    use alloc::vec;
    use rand::SeedableRng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn setup() -> (crate::corpus::Corpus, Vocab) {
        let corpus = generate(&GenConfig {
            n_topics: 20,
            passages_per_topic: 5,
            n_conversations: 10,
            turns_min: 4,
            turns_max: 4,
            ..Default::default()
        })
        .unwrap();
        let texts = corpus
            .passages
            .iter()
            .map(|p| p.text.as_str())
            .chain(corpus.conversations.iter().flat_map(|c| c.turns.iter().flat_map(|t| [t.query.as_str(), t.response.as_str(), t.rewrite.as_str()])));
        let vocab = Vocab::build(texts, 1).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn first_turn_has_no_history() {
        let (corpus, vocab) = setup();
        let s = Sampler::new(&vocab, &corpus.passages, 256, 4, SamplingMode::Dynamic);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = &corpus.conversations[0];
        let inst = s.sample_instance(c, 1, &mut rng).unwrap();
        assert_eq!(inst.start, 1);
        assert_eq!(vocab.decode(&inst.dialogue.ids).unwrap(), alloc::format!("<|user|> {}", c.turns[0].query));
    }

    #[test]
    fn forced_start_gives_full_window() {
        let (corpus, vocab) = setup();
        let s = Sampler::new(&vocab, &corpus.passages, 256, 4, SamplingMode::Dynamic);
        let c = &corpus.conversations[0];
        let inst = s.instance_from(c, 3, 1).unwrap();
        let t = &c.turns;
        let want = alloc::format!(
            "<|user|> {} <|assistant|> {} <|user|> {} <|assistant|> {} <|user|> {}",
            t[0].query, t[0].response, t[1].query, t[1].response, t[2].query
        );
        assert_eq!(vocab.decode(&inst.dialogue.ids).unwrap(), want);
        let (a, b) = inst.dialogue.current_query_span;
        assert_eq!(vocab.decode(&inst.dialogue.ids[a..b]).unwrap(), t[2].query);
        assert_eq!(inst.dialogue.current_query_span.1, inst.dialogue.total_len());
        // mask covers exactly the response suffix
        let first = inst.gen_mask.iter().position(|&m| m).unwrap();
        assert!(inst.gen_mask[first..].iter().all(|&m| m));
        assert_eq!(vocab.decode(&inst.gen_ids[first..]).unwrap(), t[2].response);
        assert_eq!(vocab.decode(&inst.rewrite.ids).unwrap(), alloc::format!("<|user|> {}", t[2].rewrite));
    }

    #[test]
    fn overflow_advances_start() {
        let (corpus, vocab) = setup();
        let c = &corpus.conversations[0];
        let wide = Sampler::new(&vocab, &corpus.passages, 256, 4, SamplingMode::Dynamic);
        let full = wide.instance_from(c, 4, 1).unwrap();
        let last = wide.instance_from(c, 4, 3).unwrap();
        let fit = full.gen_ids.len() - 1;
        let narrow = Sampler::new(&vocab, &corpus.passages, fit.max(last.gen_ids.len()), 4, SamplingMode::Dynamic);
        let inst = narrow.instance_from(c, 4, 1).unwrap();
        assert!(inst.start > 1);
        let tiny = Sampler::new(&vocab, &corpus.passages, 3, 4, SamplingMode::Dynamic);
        assert!(matches!(tiny.instance_from(c, 4, 1), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn full_history_mode_always_starts_at_one() {
        let (corpus, vocab) = setup();
        let s = Sampler::new(&vocab, &corpus.passages, 256, 4, SamplingMode::FullHistory);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            assert_eq!(s.sample_instance(&corpus.conversations[1], 4, &mut rng).unwrap().start, 1);
        }
    }

    #[test]
    fn epoch_counts_negatives_and_determinism() {
        let (corpus, vocab) = setup();
        let s = Sampler::new(&vocab, &corpus.passages, 256, 4, SamplingMode::Dynamic);
        let epoch = |seed| s.build_epoch(&corpus.conversations, &mut ChaCha8Rng::seed_from_u64(seed), 8).unwrap();
        let a = epoch(7);
        assert_eq!(a.iter().map(|b| b.size).sum::<usize>(), 40);
        assert!(a[..a.len() - 1].iter().all(|b| b.size == 8));
        for b in &a {
            assert_eq!(b.size, b.instances.len());
            for inst in &b.instances {
                assert!(!inst.negative_ids.contains(&inst.positive_id));
                assert!(inst.gold_ids.iter().all(|g| !inst.negative_ids.contains(g)));
                assert!(inst.negative_ids.len() >= 4);
            }
        }
        assert_eq!(a, epoch(7));
        assert_ne!(a, epoch(8));
        assert!(s.build_epoch(&corpus.conversations, &mut ChaCha8Rng::seed_from_u64(1), 1).is_err());
        let small = &corpus.passages[..4];
        let s2 = Sampler::new(&vocab, small, 256, 4, SamplingMode::Dynamic);
        assert!(s2.build_epoch(&corpus.conversations[..0], &mut ChaCha8Rng::seed_from_u64(1), 2).is_err());
    }

    #[test]
    fn start_points_are_uniform() {
        let (corpus, vocab) = setup();
        let s = Sampler::new(&vocab, &corpus.passages, 256, 4, SamplingMode::Dynamic);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=8 {
            let mut counts = vec![0f64; n - 1];
            let draws = 10_000;
            for _ in 0..draws {
                counts[s.draw_start(n, &mut rng) - 1] += 1.0;
            }
            let e = draws as f64 / (n - 1) as f64;
            let chi2: f64 = counts.iter().map(|o| (o - e) * (o - e) / e).sum();
            let p = if n == 2 { 1.0 } else { 1.0 - ChiSquared::new((n - 2) as f64).unwrap().cdf(chi2) };
            assert!(p > 0.01, "n={n} chi2={chi2} p={p}");
        }
        // the instance path uses the same draw
        let c = &corpus.conversations[0];
        let mut seen = BTreeSet::new();
        for _ in 0..200 {
            seen.insert(s.sample_instance(c, 4, &mut rng).unwrap().start);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}

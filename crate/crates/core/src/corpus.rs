//! Synthetic multi-turn conversational search data.
//!
//! Every topic is one entity with a distinct made-up name. Each of its
//! passages describes one attribute of that entity. A conversation walks
//! through attributes, switching topic with probability `p_shift` and, on
//! turns that stay on topic, referring back to the entity by pronoun or
//! ellipsis with probability `p_anaphora`. The stored rewrite of such a turn
//! names the entity explicitly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub topic_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Turn {
    pub query: String,
    pub response: String,
    pub gold_passage_ids: Vec<String>,
    pub rewrite: String,
    pub topic_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_topics: usize,
    pub passages_per_topic: usize,
    pub n_conversations: usize,
    pub turns_min: usize,
    pub turns_max: usize,
    pub p_shift: f64,
    pub p_anaphora: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_topics: 200,
            passages_per_topic: 10,
            n_conversations: 240,
            turns_min: 3,
            turns_max: 6,
            p_shift: 0.3,
            p_anaphora: 0.6,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_topics == 0 || self.passages_per_topic == 0 || self.n_conversations == 0 || self.turns_min == 0 {
            return bad("all counts must be at least 1".into());
        }
        if self.turns_min > self.turns_max {
            return bad(format!("turns_min {} exceeds turns_max {}", self.turns_min, self.turns_max));
        }
        for (name, p) in [("p_shift", self.p_shift), ("p_anaphora", self.p_anaphora)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.n_topics < 2 && self.p_shift > 0.0 {
            return bad("topic shifts need at least 2 topics".into());
        }
        if self.passages_per_topic > ATTRIBUTES.len() {
            return bad(format!("passages_per_topic is limited to {}", ATTRIBUTES.len()));
        }
        if self.n_topics > SYLLABLES.len().pow(3) {
            return bad(format!("n_topics is limited to {}", SYLLABLES.len().pow(3)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub passages: Vec<Passage>,
    pub conversations: Vec<Conversation>,
}

pub const ATTRIBUTES: [&str; 24] = [
    "population", "climate", "history", "economy", "language", "cuisine", "architecture", "festival",
    "wildlife", "music", "government", "geography", "sport", "religion", "transport", "education",
    "industry", "art", "literature", "currency", "landmark", "river", "mountain", "holiday",
];

const VALUES: [&str; 40] = [
    "ancient", "modern", "vast", "small", "famous", "rare", "coastal", "northern", "southern", "vibrant",
    "quiet", "rich", "humble", "golden", "silver", "green", "crimson", "bright", "dark", "gentle",
    "fierce", "colorful", "sacred", "busy", "rural", "urban", "tropical", "frozen", "sunny", "misty",
    "open", "hidden", "grand", "simple", "elegant", "rugged", "fertile", "dry", "wet", "proud",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "ven", "dor", "sil", "tha", "bru", "nex", "qui", "zan", "fel", "gor", "pim", "tes",
];

const EXPLICIT_QUERIES: [&str; 3] = [
    "what is the {a} of {e}",
    "tell me about the {a} of {e}",
    "how would you describe the {a} of {e}",
];

const ANAPHORIC_QUERIES: [&str; 4] = ["what about its {a}", "what is its {a}", "tell me about its {a}", "and the {a}"];

/// Words that mark a query as depending on earlier turns.
pub const PRONOUNS: [&str; 4] = ["it", "its", "they", "their"];

fn fill(template: &str, attribute: &str, entity: &str) -> String {
    template.replace("{a}", attribute).replace("{e}", entity)
}

fn canonical_rewrite(attribute: &str, entity: &str) -> String {
    fill(EXPLICIT_QUERIES[0], attribute, entity)
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let s = SYLLABLES.len();
    let mut codes: Vec<usize> = (0..s * s * s).collect();
    codes.shuffle(rng);
    codes
        .into_iter()
        .take(n)
        .map(|c| format!("{}{}{}", SYLLABLES[c / (s * s)], SYLLABLES[(c / s) % s], SYLLABLES[c % s]))
        .collect()
}

struct Facts {
    values: [&'static str; 3],
}

/// Generates the passage collection and conversations for `config`.
/// Output is a pure function of the config, seed included.
pub fn generate(config: &GenConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let entities = entity_names(config.n_topics, &mut rng);

    let mut passages = Vec::with_capacity(config.n_topics * config.passages_per_topic);
    let mut facts = Vec::with_capacity(passages.capacity());
    for (t, entity) in entities.iter().enumerate() {
        for attribute in &ATTRIBUTES[..config.passages_per_topic] {
            let mut vals = [""; 3];
            for v in &mut vals {
                *v = VALUES[rng.gen_range(0..VALUES.len())];
            }
            let text = format!(
                "the {attribute} of {entity} is {} and {} . people say {entity} has a {} {attribute}",
                vals[0], vals[1], vals[2]
            );
            passages.push(Passage {
                id: format!("p{:06}", passages.len()),
                text,
                topic_id: t as u32,
            });
            facts.push(Facts { values: vals });
        }
    }

    let ppt = config.passages_per_topic;
    let mut conversations = Vec::with_capacity(config.n_conversations);
    for c in 0..config.n_conversations {
        let n_turns = rng.gen_range(config.turns_min..=config.turns_max);
        let mut topic = rng.gen_range(0..config.n_topics);
        let mut asked: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut turns = Vec::with_capacity(n_turns);
        for t in 0..n_turns {
            let mut explicit = true;
            if t > 0 {
                if config.n_topics >= 2 && rng.gen_bool(config.p_shift) {
                    let other = rng.gen_range(0..config.n_topics - 1);
                    topic = if other >= topic { other + 1 } else { other };
                } else if rng.gen_bool(config.p_anaphora) {
                    explicit = false;
                }
            }
            let used = asked.entry(topic).or_default();
            let fresh: Vec<usize> = (0..ppt).filter(|a| !used.contains(a)).collect();
            let attr_idx = if fresh.is_empty() {
                rng.gen_range(0..ppt)
            } else {
                fresh[rng.gen_range(0..fresh.len())]
            };
            used.push(attr_idx);

            let entity = &entities[topic];
            let attribute = ATTRIBUTES[attr_idx];
            let query = if explicit {
                fill(EXPLICIT_QUERIES[rng.gen_range(0..EXPLICIT_QUERIES.len())], attribute, entity)
            } else {
                fill(ANAPHORIC_QUERIES[rng.gen_range(0..ANAPHORIC_QUERIES.len())], attribute, entity)
            };
            let rewrite = if explicit { query.clone() } else { canonical_rewrite(attribute, entity) };
            let p = topic * ppt + attr_idx;
            let v = &facts[p].values;
            turns.push(Turn {
                query,
                response: format!("the {attribute} of {entity} is {} and {}", v[0], v[1]),
                gold_passage_ids: alloc::vec![passages[p].id.clone()],
                rewrite,
                topic_id: topic as u32,
            });
        }
        conversations.push(Conversation {
            id: format!("c{:05}", c),
            turns,
        });
    }
    Ok(Corpus {
        passages,
        conversations,
    })
}

/// The self-contained rewrite stored for a turn (equal to the query when the
/// query needs no context). `None` if the turn does not exist.
pub fn oracle_rewrite(conversation: &Conversation, turn_index: usize) -> Option<&str> {
    conversation.turns.get(turn_index).map(|t| t.rewrite.as_str())
}

/// True when the query leans on earlier turns (its rewrite differs).
pub fn is_context_dependent(turn: &Turn) -> bool {
    turn.rewrite != turn.query
}

impl Corpus {
    /// Map from passage id to collection position.
    pub fn passage_index(&self) -> BTreeMap<&str, usize> {
        self.passages.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect()
    }

    /// Checks every schema invariant; dangling gold ids name the id.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeMap::new();
        for (i, p) in self.passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(Error::InvalidInput(format!("passage {} has empty text", p.id)));
            }
            if ids.insert(p.id.as_str(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate passage id {}", p.id)));
            }
        }
        let mut conv_ids = BTreeMap::new();
        for c in &self.conversations {
            if conv_ids.insert(c.id.as_str(), ()).is_some() {
                return Err(Error::InvalidInput(format!("duplicate conversation id {}", c.id)));
            }
            if c.turns.is_empty() {
                return Err(Error::InvalidInput(format!("conversation {} has no turns", c.id)));
            }
            for (k, t) in c.turns.iter().enumerate() {
                if t.gold_passage_ids.is_empty() {
                    return Err(Error::InvalidInput(format!("conversation {} turn {} has no gold passages", c.id, k + 1)));
                }
                if t.query.trim().is_empty() || t.rewrite.trim().is_empty() {
                    return Err(Error::InvalidInput(format!("conversation {} turn {} has an empty query", c.id, k + 1)));
                }
                for g in &t.gold_passage_ids {
                    if !ids.contains_key(g.as_str()) {
                        return Err(Error::UnknownId(g.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Splits off the last `n_eval` conversations as a held-out set.
    pub fn split(&self, n_eval: usize) -> (Vec<Conversation>, Vec<Conversation>) {
        let cut = self.conversations.len().saturating_sub(n_eval);
        (self.conversations[..cut].to_vec(), self.conversations[cut..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::words;

    fn cfg(p_shift: f64, p_anaphora: f64) -> GenConfig {
        GenConfig {
            n_topics: 20,
            passages_per_topic: 6,
            n_conversations: 50,
            turns_min: 2,
            turns_max: 6,
            p_shift,
            p_anaphora,
            seed: 42,
        }
    }

    #[test]
    fn no_shift_keeps_one_topic() {
        let c = generate(&cfg(0.0, 0.5)).unwrap();
        for conv in &c.conversations {
            assert!(conv.turns.iter().all(|t| t.topic_id == conv.turns[0].topic_id));
        }
    }

    #[test]
    fn certain_shift_changes_topic_every_turn() {
        let c = generate(&cfg(1.0, 0.5)).unwrap();
        for conv in &c.conversations {
            for w in conv.turns.windows(2) {
                assert_ne!(w[0].topic_id, w[1].topic_id);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        assert_eq!(generate(&cfg(0.3, 0.6)).unwrap(), generate(&cfg(0.3, 0.6)).unwrap());
        let mut other = cfg(0.3, 0.6);
        other.seed = 43;
        assert_ne!(generate(&cfg(0.3, 0.6)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn shifting_needs_two_topics() {
        let mut c = cfg(0.5, 0.5);
        c.n_topics = 1;
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        c.p_shift = 0.0;
        assert!(generate(&c).is_ok());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(0.5, 0.5);
        c.turns_min = 7;
        assert!(generate(&c).is_err());
        let mut c = cfg(1.5, 0.5);
        assert!(generate(&c).is_err());
        c.p_shift = 0.5;
        c.passages_per_topic = 0;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn rewrites_are_self_contained() {
        let corpus = generate(&cfg(0.3, 0.8)).unwrap();
        let index = corpus.passage_index();
        let mut anaphoric = 0;
        for conv in &corpus.conversations {
            assert_eq!(oracle_rewrite(conv, 0).unwrap(), conv.turns[0].query);
            for t in &conv.turns {
                let gold = &corpus.passages[index[t.gold_passage_ids[0].as_str()]];
                assert_eq!(gold.topic_id, t.topic_id);
                assert!(words(&t.rewrite).all(|w| !PRONOUNS.contains(&w.as_str())));
                if is_context_dependent(t) {
                    anaphoric += 1;
                    assert!(!t.query.contains(&*gold.text.split(' ').nth(3).unwrap()));
                }
            }
        }
        assert!(anaphoric > 0);
        assert!(oracle_rewrite(&corpus.conversations[0], 99).is_none());
    }

    #[test]
    fn generated_corpus_validates() {
        let corpus = generate(&cfg(0.3, 0.6)).unwrap();
        corpus.validate().unwrap();
        let mut broken = corpus.clone();
        broken.conversations[0].turns[0].gold_passage_ids = alloc::vec!["nope".into()];
        assert_eq!(broken.validate().unwrap_err(), Error::UnknownId("nope".into()));
        let mut broken = corpus;
        broken.conversations[1].turns[0].gold_passage_ids.clear();
        assert!(broken.validate().is_err());
    }

    #[test]
    fn entity_names_are_distinct() {
        let corpus = generate(&GenConfig { n_topics: 1000, n_conversations: 1, ..GenConfig::default() }).unwrap();
        let mut names: Vec<&str> = corpus
            .passages
            .iter()
            .step_by(10)
            .map(|p| p.text.split(' ').nth(3).unwrap())
            .collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}

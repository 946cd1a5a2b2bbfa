//! Flat `key = value` experiment configuration.
//!
//! One file covers corpus generation, vocabulary, model, training and
//! evaluation. Blank lines and `#` comments are ignored; unknown or repeated
//! keys are rejected. Keys not given keep the desk-profile defaults.

use std::fmt::Write as _;
use std::path::Path;

use convdr_core::corpus::GenConfig;
use convdr_core::losses::{LossWeights, Similarity};
use convdr_core::model::{ModelConfig, Pooling};
use convdr_core::query_type::{QueryMode, QueryTypeConfig};
use convdr_core::sampler::SamplingMode;
use convdr_core::trainer::{Ablation, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    /// Conversations held out for evaluation.
    pub n_eval: usize,
    pub min_count: usize,
    /// `vocab_size` is taken from the vocabulary file at train time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub query: QueryTypeConfig,
    pub k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            n_eval: 40,
            min_count: 1,
            model: ModelConfig {
                vocab_size: 0,
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                context_len: 256,
                ff_mult: 4,
                dropout: 0.0,
                tie_embeddings: true,
            },
            train: TrainConfig::desk(),
            query: QueryTypeConfig::default(),
            k: 100,
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::render`] writes them.
pub const KEYS: [&str; 36] = [
    "n_topics",
    "passages_per_topic",
    "n_conversations",
    "turns_min",
    "turns_max",
    "p_shift",
    "p_anaphora",
    "n_eval",
    "min_count",
    "d_model",
    "n_layers",
    "n_heads",
    "context_len",
    "ff_mult",
    "dropout",
    "tie_embeddings",
    "epochs",
    "batch_size",
    "learning_rate",
    "seed",
    "lambda_igl",
    "lambda_g",
    "tau",
    "ccl_on",
    "igl_on",
    "gen_on",
    "sampling_mode",
    "k_rand",
    "pooling",
    "similarity",
    "igl_two_sided",
    "igl_normalized",
    "grad_clip",
    "query_type",
    "window_turns",
    "k",
];

pub fn sampling_mode_name(m: SamplingMode) -> &'static str {
    match m {
        SamplingMode::Dynamic => "dynamic",
        SamplingMode::FullHistory => "full_history",
    }
}

pub fn pooling_name(p: Pooling) -> &'static str {
    match p {
        Pooling::QueryFocused => "query",
        Pooling::FullSequence => "sequence",
    }
}

pub fn parse_pooling(s: &str) -> Option<Pooling> {
    match s {
        "query" => Some(Pooling::QueryFocused),
        "sequence" => Some(Pooling::FullSequence),
        _ => None,
    }
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::Cosine => "cosine",
        Similarity::Dot => "dot",
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|(line, msg)| Error::Usage(format!("{}:{line}: {msg}", path.display())))
    }

    /// Parses config text; errors carry the 1-based line number.
    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or((i + 1, format!("expected key = value, got {line:?}")))?;
            if !KEYS.contains(&key) {
                return Err((i + 1, format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err((i + 1, format!("key {key:?} given twice")));
            }
            cfg.set(key, value).map_err(|m| (i + 1, m))?;
        }
        cfg.check().map_err(|m| (0, m))?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (g, m, t) = (&mut self.gen, &mut self.model, &mut self.train);
        match key {
            "n_topics" => g.n_topics = parse_value(key, v)?,
            "passages_per_topic" => g.passages_per_topic = parse_value(key, v)?,
            "n_conversations" => g.n_conversations = parse_value(key, v)?,
            "turns_min" => g.turns_min = parse_value(key, v)?,
            "turns_max" => g.turns_max = parse_value(key, v)?,
            "p_shift" => g.p_shift = parse_value(key, v)?,
            "p_anaphora" => g.p_anaphora = parse_value(key, v)?,
            "n_eval" => self.n_eval = parse_value(key, v)?,
            "min_count" => self.min_count = parse_value(key, v)?,
            "d_model" => m.d_model = parse_value(key, v)?,
            "n_layers" => m.n_layers = parse_value(key, v)?,
            "n_heads" => m.n_heads = parse_value(key, v)?,
            "context_len" => m.context_len = parse_value(key, v)?,
            "ff_mult" => m.ff_mult = parse_value(key, v)?,
            "dropout" => m.dropout = parse_value(key, v)?,
            "tie_embeddings" => m.tie_embeddings = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "learning_rate" => t.learning_rate = parse_value(key, v)?,
            "seed" => self.set_seed(parse_value(key, v)?),
            "lambda_igl" => t.weights.lambda_igl = parse_value(key, v)?,
            "lambda_g" => t.weights.lambda_g = parse_value(key, v)?,
            "tau" => t.weights.tau = parse_value(key, v)?,
            "ccl_on" => t.ablation.ccl_on = parse_value(key, v)?,
            "igl_on" => t.ablation.igl_on = parse_value(key, v)?,
            "gen_on" => t.ablation.gen_on = parse_value(key, v)?,
            "sampling_mode" => {
                t.sampling_mode = match v {
                    "dynamic" => SamplingMode::Dynamic,
                    "full_history" => SamplingMode::FullHistory,
                    _ => return Err(format!("invalid value {v:?} for {key}; expected dynamic or full_history")),
                }
            }
            "k_rand" => t.k_rand = parse_value(key, v)?,
            "pooling" => t.pooling = parse_pooling(v).ok_or(format!("invalid value {v:?} for {key}; expected query or sequence"))?,
            "similarity" => {
                t.similarity = match v {
                    "cosine" => Similarity::Cosine,
                    "dot" => Similarity::Dot,
                    _ => return Err(format!("invalid value {v:?} for {key}; expected cosine or dot")),
                }
            }
            "igl_two_sided" => t.igl_two_sided = parse_value(key, v)?,
            "igl_normalized" => t.igl_normalized = parse_value(key, v)?,
            "grad_clip" => t.grad_clip = if v == "none" { None } else { Some(parse_value(key, v)?) },
            "query_type" => self.query.mode = v.parse::<QueryMode>().map_err(|e| e.to_string())?,
            "window_turns" => self.query.window_turns = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    /// The one seed behind generation, initialization and sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.train.seed = seed;
    }

    fn check(&self) -> std::result::Result<(), String> {
        self.gen.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.query.validate().map_err(|e| e.to_string())?;
        if self.n_eval >= self.gen.n_conversations {
            return Err(format!("n_eval {} leaves no training conversations out of {}", self.n_eval, self.gen.n_conversations));
        }
        if self.min_count == 0 || self.k == 0 {
            return Err("min_count and k must be at least 1".into());
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`Self::parse`].
    pub fn render(&self) -> String {
        let (g, m, t) = (&self.gen, &self.model, &self.train);
        let w: &LossWeights = &t.weights;
        let a: &Ablation = &t.ablation;
        let values: [String; 36] = [
            g.n_topics.to_string(),
            g.passages_per_topic.to_string(),
            g.n_conversations.to_string(),
            g.turns_min.to_string(),
            g.turns_max.to_string(),
            g.p_shift.to_string(),
            g.p_anaphora.to_string(),
            self.n_eval.to_string(),
            self.min_count.to_string(),
            m.d_model.to_string(),
            m.n_layers.to_string(),
            m.n_heads.to_string(),
            m.context_len.to_string(),
            m.ff_mult.to_string(),
            m.dropout.to_string(),
            m.tie_embeddings.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.seed.to_string(),
            w.lambda_igl.to_string(),
            w.lambda_g.to_string(),
            w.tau.to_string(),
            a.ccl_on.to_string(),
            a.igl_on.to_string(),
            a.gen_on.to_string(),
            sampling_mode_name(t.sampling_mode).into(),
            t.k_rand.to_string(),
            pooling_name(t.pooling).into(),
            similarity_name(t.similarity).into(),
            t.igl_two_sided.to_string(),
            t.igl_normalized.to_string(),
            t.grad_clip.map_or("none".into(), |c| c.to_string()),
            self.query.mode.name().into(),
            self.query.window_turns.to_string(),
            self.k.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut c = ExperimentConfig::default();
        c.train.grad_clip = Some(1.5);
        c.train.sampling_mode = SamplingMode::FullHistory;
        c.query.mode = QueryMode::Window;
        c.set_seed(9);
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert_eq!(ExperimentConfig::parse("epochs = 2\nbogus = 1").unwrap_err().0, 2);
        assert_eq!(ExperimentConfig::parse("epochs = 2\n\nepochs = 3").unwrap_err().0, 3);
        assert!(ExperimentConfig::parse("epochs").is_err());
        assert!(ExperimentConfig::parse("ccl_on = false").is_err());
        assert!(ExperimentConfig::parse("sampling_mode = sometimes").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = ExperimentConfig::parse("# desk run\n\nepochs = 3 # short\nseed = 5\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!((c.gen.seed, c.train.seed), (5, 5));
    }
}

//! Training loop for the combined retrieval / alignment / generation
//! objective, plus evaluation helpers and the ablation grid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{generate, Conversation, GenConfig, Passage};
use crate::error::{invalid, Error, Result};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::eval::{evaluate_run, qrels_from_conversations, EvalReport};
use crate::graph::{Graph, NodeId};
use crate::index::build_store;
use crate::losses::{ccl_graph, combined_graph, gen_graph, igl_graph, LossBreakdown, LossWeights, Similarity};
use crate::model::{forward_packed, lm_logits, ModelConfig, ModelParams, Pooling};
use crate::optim::{clip_global_norm, Adam};
use crate::query_type::{retrieve, QueryTypeConfig};
use crate::sampler::{window, Batch, Sampler, SamplingMode};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{encode_generation, encode_passage, EncodedDialogue, Vocab};

/// Which loss components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub ccl_on: bool,
    pub igl_on: bool,
    pub gen_on: bool,
}

impl Ablation {
    pub const FULL: Self = Self { ccl_on: true, igl_on: true, gen_on: true };
    pub const CCL_IGL: Self = Self { ccl_on: true, igl_on: true, gen_on: false };
    pub const CCL_ONLY: Self = Self { ccl_on: true, igl_on: false, gen_on: false };

    pub fn name(&self) -> String {
        let mut parts = vec!["ccl"];
        if self.igl_on {
            parts.push("igl");
        }
        if self.gen_on {
            parts.push("gen");
        }
        parts.join("+")
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub sampling_mode: SamplingMode,
    /// Random negatives per instance on top of the in-batch ones.
    pub k_rand: usize,
    pub pooling: Pooling,
    pub similarity: Similarity,
    /// Let the alignment loss pull the rewrite embedding as well.
    pub igl_two_sided: bool,
    /// Measure the alignment distance between unit-normalized embeddings.
    pub igl_normalized: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 24,
            learning_rate: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::FULL,
            sampling_mode: SamplingMode::Dynamic,
            k_rand: 4,
            pooling: Pooling::QueryFocused,
            similarity: Similarity::Cosine,
            igl_two_sided: false,
            igl_normalized: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the small synthetic corpora: more epochs, smaller
    /// batches and a larger step size than the defaults.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.ablation.ccl_on {
            return bad("the contrastive loss cannot be disabled".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.weights.validate()
    }

    /// Weights with disabled components set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_igl: if self.ablation.igl_on { self.weights.lambda_igl } else { 0.0 },
            lambda_g: if self.ablation.gen_on { self.weights.lambda_g } else { 0.0 },
            tau: self.weights.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Milliseconds source for step timing; the library has no clock of its own.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

/// Reports zero elapsed time.
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

/// Passages encoded once for the whole run.
pub struct EncodedCollection {
    pub encoded: Vec<EncodedDialogue>,
    pub index: BTreeMap<String, usize>,
}

impl EncodedCollection {
    pub fn new(passages: &[Passage], vocab: &Vocab, context_len: usize) -> Result<Self> {
        let encoded = passages
            .iter()
            .map(|p| encode_passage(&p.text, vocab, context_len).map_err(|e| invalid!("passage {}: {e}", p.id)))
            .collect::<Result<Vec<_>>>()?;
        let index = passages.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Ok(Self { encoded, index })
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownId(id.into()))
    }
}

/// Loss nodes of one batch.
pub struct BatchLoss {
    pub total: NodeId,
    /// Pooled rewrite embeddings (before any detach).
    pub rewrites: Option<NodeId>,
    pub ccl: NodeId,
    pub igl: Option<NodeId>,
    pub gen: Option<NodeId>,
}

impl BatchLoss {
    /// Component values read off the graph; `l_total` is their exact
    /// weighted combination in `f64`.
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, w: &LossWeights) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item().as_f64());
        LossBreakdown::new(v(Some(self.ccl)), v(self.igl), v(self.gen), w)
    }
}

/// Builds the loss of `batch` on `g`.
///
/// One packed forward pass covers every sequence. With the generation loss
/// on, each dialogue is a prefix of its generation sequence, so the query
/// embedding is pooled from that sequence's leading rows (causal attention
/// makes them identical to a separate dialogue pass).
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &[NodeId],
    model: &ModelConfig,
    tc: &TrainConfig,
    batch: &Batch,
    collection: &EncodedCollection,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    batch_loss_with(g, params, model, tc, batch, collection, dropout_rng, None)
}

/// As [`batch_loss`], optionally with the rewrite embeddings supplied as a
/// constant `[B × d]` tensor instead of being encoded.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_with<T: Scalar>(
    g: &mut Graph<T>,
    params: &[NodeId],
    model: &ModelConfig,
    tc: &TrainConfig,
    batch: &Batch,
    collection: &EncodedCollection,
    dropout_rng: Option<&mut ChaCha8Rng>,
    fixed_rewrites: Option<&Tensor<T>>,
) -> Result<BatchLoss> {
    let b = batch.instances.len();
    let w = tc.effective_weights();
    // unique passages in first-seen order
    let mut col_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: Vec<usize> = Vec::new();
    let mut col = |pos: usize, cols: &mut Vec<usize>| {
        *col_of.entry(pos).or_insert_with(|| {
            cols.push(pos);
            cols.len() - 1
        })
    };
    let mut positives = Vec::with_capacity(b);
    let mut candidates = Vec::with_capacity(b);
    for inst in &batch.instances {
        let p = col(collection.position(&inst.positive_id)?, &mut cols);
        let mut c = vec![p];
        for n in &inst.negative_ids {
            c.push(col(collection.position(n)?, &mut cols));
        }
        positives.push(p);
        candidates.push(c);
    }

    let mut seqs: Vec<&[u32]> = Vec::new();
    for inst in &batch.instances {
        seqs.push(if tc.ablation.gen_on { &inst.gen_ids } else { &inst.dialogue.ids });
    }
    let rewrite_base = seqs.len();
    if tc.ablation.igl_on && fixed_rewrites.is_none() {
        seqs.extend(batch.instances.iter().map(|x| x.rewrite.ids.as_slice()));
    }
    let passage_base = seqs.len();
    seqs.extend(cols.iter().map(|&p| collection.encoded[p].ids.as_slice()));

    let packed = forward_packed(g, model, params, &seqs, dropout_rng)?;
    let q_ranges: Vec<_> = batch
        .instances
        .iter()
        .enumerate()
        .map(|(i, x)| packed.rows(i, tc.pooling.range(&x.dialogue)))
        .collect();
    let q = g.segment_mean(packed.hidden, &q_ranges)?;
    let p_ranges: Vec<_> = cols
        .iter()
        .enumerate()
        .map(|(j, &p)| packed.rows(passage_base + j, collection.encoded[p].current_query_span))
        .collect();
    let p = g.segment_mean(packed.hidden, &p_ranges)?;
    let ccl = ccl_graph(g, q, p, &positives, candidates, w.tau, tc.similarity)?;

    let rewrites = match (tc.ablation.igl_on, fixed_rewrites) {
        (false, _) => None,
        (true, Some(t)) => Some(g.constant(t.clone())),
        (true, None) => {
            let r_ranges: Vec<_> = batch
                .instances
                .iter()
                .enumerate()
                .map(|(i, x)| packed.rows(rewrite_base + i, tc.pooling.range(&x.rewrite)))
                .collect();
            Some(g.segment_mean(packed.hidden, &r_ranges)?)
        }
    };
    let igl = match rewrites {
        Some(r) if tc.igl_normalized => {
            let qn = g.normalize_rows(q)?;
            let rn = g.normalize_rows(r)?;
            Some(igl_graph(g, qn, rn, tc.igl_two_sided)?)
        }
        Some(r) => Some(igl_graph(g, q, r, tc.igl_two_sided)?),
        None => None,
    };

    let gen = if tc.ablation.gen_on {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, x) in batch.instances.iter().enumerate() {
            for j in 0..x.gen_ids.len() - 1 {
                if x.gen_mask[j + 1] {
                    rows.push((packed.offsets[i] + j) as u32);
                    targets.push(x.gen_ids[j + 1]);
                }
            }
        }
        let h = g.gather(packed.hidden, &rows)?;
        let logits = lm_logits(g, model, params, h)?;
        Some(gen_graph(g, logits, &targets)?)
    } else {
        None
    };

    let total = combined_graph(g, ccl, igl, gen, &w)?;
    Ok(BatchLoss { total, rewrites, ccl, igl, gen })
}

/// Streams of the run's generator, kept apart so that changing one use of
/// randomness does not shift the others.
const STREAM_SAMPLER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains a freshly initialized model and returns its parameters.
///
/// `on_step` sees every step's log. A non-finite loss aborts with the step
/// and loss components.
pub fn train(
    passages: &[Passage],
    conversations: &[Conversation],
    vocab: &Vocab,
    model: &ModelConfig,
    tc: &TrainConfig,
    clock: &dyn Clock,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<ModelParams<f32>> {
    tc.validate()?;
    let params = ModelParams::<f32>::init(model, tc.seed)?;
    train_from(params, passages, conversations, vocab, tc, clock, on_step)
}

/// Continues training from `params`.
pub fn train_from(
    mut params: ModelParams<f32>,
    passages: &[Passage],
    conversations: &[Conversation],
    vocab: &Vocab,
    tc: &TrainConfig,
    clock: &dyn Clock,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<ModelParams<f32>> {
    tc.validate()?;
    if conversations.is_empty() {
        return Err(invalid!("no training conversations"));
    }
    let model = params.config.clone();
    let collection = EncodedCollection::new(passages, vocab, model.context_len)?;
    let sampler = Sampler::new(vocab, passages, model.context_len, tc.k_rand, tc.sampling_mode);
    let mut rng = rng_for(tc.seed, STREAM_SAMPLER);
    let mut drop_rng = rng_for(tc.seed, STREAM_DROPOUT);
    let w = tc.effective_weights();
    let mut opt = Adam::default();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        for batch in sampler.build_epoch(conversations, &mut rng, tc.batch_size)? {
            let t0 = clock.now_ms();
            let mut g = Graph::new();
            let nodes = params.attach(&mut g, true);
            let dr = (model.dropout > 0.0).then_some(&mut drop_rng);
            let loss = batch_loss(&mut g, &nodes, &model, tc, &batch, &collection, dr)?;
            let losses = loss.breakdown(&g, &w);
            if !losses.is_finite() || !g.value(loss.total).is_finite() {
                return Err(Error::NanLoss {
                    step,
                    ccl: losses.l_ccl,
                    igl: losses.l_igl,
                    gen: losses.l_g,
                });
            }
            let mut grads = g.backward(loss.total)?;
            let mut grads: Vec<Tensor<f32>> = nodes.iter().map(|&n| grads.take(n)).collect();
            drop(g);
            let grad_norm = match tc.grad_clip {
                Some(c) => clip_global_norm(&mut grads, c),
                None => crate::optim::global_norm(&grads),
            };
            opt.step(&mut params.tensors, &grads, tc.learning_rate)?;
            on_step(&StepLog {
                step,
                epoch,
                losses,
                grad_norm,
                wall_ms: clock.now_ms().saturating_sub(t0),
            });
            step += 1;
        }
    }
    Ok(params)
}

/// Retrieval metrics of `params` on `conversations` against `passages`.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    passages: &[Passage],
    conversations: &[Conversation],
    query: &QueryTypeConfig,
    pooling: Pooling,
) -> Result<EvalReport> {
    let store = build_store(passages, vocab, params)?;
    let run = retrieve(params, vocab, &store, conversations, query, pooling, 100)?;
    evaluate_run(&run, &qrels_from_conversations(conversations))
}

/// Mean per-token NLL of every gold response given its full history and
/// gold passage (oldest turns dropped if needed to fit).
pub fn response_nll<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    passages: &[Passage],
    conversations: &[Conversation],
) -> Result<f64> {
    let text: BTreeMap<&str, &str> = passages.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect();
    let ctx = params.config.context_len;
    let mut seqs: Vec<(Vec<u32>, Vec<bool>)> = Vec::new();
    for c in conversations {
        for n in 1..=c.turns.len() {
            let t = &c.turns[n - 1];
            let gold = t.gold_passage_ids.first().ok_or_else(|| invalid!("turn without gold"))?;
            let passage = *text.get(gold.as_str()).ok_or_else(|| Error::UnknownId(gold.clone()))?;
            let turns = window(c, 1, n);
            let mut found = None;
            for drop in 0..turns.len() {
                match encode_generation(&turns[drop..], passage, &t.response, vocab, ctx) {
                    Ok(x) => {
                        found = Some(x);
                        break;
                    }
                    Err(Error::ContextOverflow { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            seqs.push(found.ok_or(Error::ContextOverflow { len: ctx + 1, max: ctx })?);
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(32) {
        let mut g = Graph::new();
        let nodes = params.attach(&mut g, false);
        let ids: Vec<&[u32]> = chunk.iter().map(|(i, _)| i.as_slice()).collect();
        let packed = forward_packed(&mut g, &params.config, &nodes, &ids, None)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, (ids, mask)) in chunk.iter().enumerate() {
            for j in 0..ids.len() - 1 {
                if mask[j + 1] {
                    rows.push((packed.offsets[i] + j) as u32);
                    targets.push(ids[j + 1]);
                }
            }
        }
        let h = g.gather(packed.hidden, &rows)?;
        let logits = lm_logits(&mut g, &params.config, &nodes, h)?;
        let l = gen_graph(&mut g, logits, &targets)?;
        total += g.value(l).item().as_f64() * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Err(invalid!("no response tokens to score"));
    }
    Ok(total / count as f64)
}

/// One trained configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub ablation: Ablation,
    pub sampling_mode: SamplingMode,
    pub pooling: Pooling,
    pub weights: Option<LossWeights>,
}

impl Variant {
    pub fn new(ablation: Ablation, sampling_mode: SamplingMode, pooling: Pooling) -> Self {
        let s = match sampling_mode {
            SamplingMode::Dynamic => "dynamic",
            SamplingMode::FullHistory => "full_history",
        };
        let p = match pooling {
            Pooling::QueryFocused => "query",
            Pooling::FullSequence => "sequence",
        };
        Self {
            name: format!("{}/{s}/{p}", ablation.name()),
            ablation,
            sampling_mode,
            pooling,
            weights: None,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            ablation: self.ablation,
            sampling_mode: self.sampling_mode,
            pooling: self.pooling,
            weights: self.weights.unwrap_or(base.weights),
            ..base.clone()
        }
    }
}

/// The three loss variants with dynamic sampling and query pooling.
pub fn loss_grid() -> Vec<Variant> {
    [Ablation::CCL_ONLY, Ablation::CCL_IGL, Ablation::FULL]
        .into_iter()
        .map(|a| Variant::new(a, SamplingMode::Dynamic, Pooling::QueryFocused))
        .collect()
}

/// Every loss variant crossed with both sampling modes and both poolings.
pub fn full_grid() -> Vec<Variant> {
    let mut out = Vec::new();
    for a in [Ablation::CCL_ONLY, Ablation::CCL_IGL, Ablation::FULL] {
        for s in [SamplingMode::Dynamic, SamplingMode::FullHistory] {
            for p in [Pooling::QueryFocused, Pooling::FullSequence] {
                out.push(Variant::new(a, s, p));
            }
        }
    }
    out
}

/// Full objective over `λ_IGL ∈ {0.5, 1, 2}` × `λ_G ∈ {0.05, 0.1, 0.3}`.
pub fn lambda_sweep_grid(base: &LossWeights) -> Vec<Variant> {
    let mut out = Vec::new();
    for li in [0.5, 1.0, 2.0] {
        for lg in [0.05, 0.1, 0.3] {
            let mut v = Variant::new(Ablation::FULL, SamplingMode::Dynamic, Pooling::QueryFocused);
            v.name = format!("lambda_igl={li}/lambda_g={lg}");
            v.weights = Some(LossWeights { lambda_igl: li, lambda_g: lg, ..*base });
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains and evaluates every variant for every seed on the same split.
pub fn run_ablation_suite(
    passages: &[Passage],
    train_conversations: &[Conversation],
    eval_conversations: &[Conversation],
    vocab: &Vocab,
    model: &ModelConfig,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let qrels_count = qrels_from_conversations(eval_conversations).len();
    if qrels_count < 100 {
        return Err(invalid!("ablations need at least 100 evaluation queries, got {qrels_count}"));
    }
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let tc = TrainConfig { seed, ..v.apply(base) };
            let params = train(passages, train_conversations, vocab, model, &tc, &NoClock, &mut |_| {})?;
            let report = evaluate_model(&params, vocab, passages, eval_conversations, &QueryTypeConfig::default(), v.pooling)?;
            let row = AblationRow {
                variant: v.clone(),
                seed,
                report,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Finite-difference checks of every loss on a toy model in `f64`.
///
/// The toy model (one layer, `d_model = 4`) is evaluated at a random point
/// whose weights are of order one, away from the near-linear region of the
/// standard initialization. Rewrite embeddings are frozen at their values at
/// that point, which makes the training gradient (no flow into the rewrite
/// branch) the exact derivative of the checked function.
pub fn gradient_check_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    gradient_check_suite_with(seed, GRADCHECK_EPSILON)
}

/// [`gradient_check_suite`] with an explicit step size.
pub fn gradient_check_suite_with(seed: u64, epsilon: f64) -> Result<Vec<GradCheckReport>> {
    use rand::Rng;
    let corpus = generate(&GenConfig {
        n_topics: 4,
        passages_per_topic: 2,
        n_conversations: 2,
        turns_min: 3,
        turns_max: 3,
        p_shift: 0.0,
        p_anaphora: 1.0,
        seed,
    })?;
    let texts = corpus
        .passages
        .iter()
        .map(|p| p.text.as_str())
        .chain(corpus.conversations.iter().flat_map(|c| c.turns.iter().flat_map(|t| [t.query.as_str(), t.response.as_str(), t.rewrite.as_str()])));
    let vocab = Vocab::build(texts, 1)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        context_len: 96,
        ff_mult: 1,
        dropout: 0.0,
        tie_embeddings: true,
    };
    let mut rng = rng_for(seed, STREAM_SAMPLER);
    let sampler = Sampler::new(&vocab, &corpus.passages, model.context_len, 1, SamplingMode::Dynamic);
    // turns 2 and 3 only: on a self-contained turn the rewrite equals the
    // query, that alignment term sits exactly at its minimum, and central
    // differences of it are pure truncation and rounding error
    let conv = &corpus.conversations[0];
    let mut instances = vec![sampler.instance_from(conv, 2, 1)?, sampler.instance_from(conv, 3, 1)?];
    sampler.attach_negatives(&mut instances, &mut rng);
    let batch = Batch { size: instances.len(), instances };
    let collection = EncodedCollection::new(&corpus.passages, &vocab, model.context_len)?;
    let mut params = ModelParams::<f64>::init(&model, seed)?;
    for t in params.tensors.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    let tc = TrainConfig::default();
    let targets = {
        let mut g = Graph::new();
        let nodes = params.attach(&mut g, false);
        let l = batch_loss(&mut g, &nodes, &model, &tc, &batch, &collection, None)?;
        g.value(l.rewrites.ok_or_else(|| invalid!("rewrite branch missing"))?).clone()
    };
    let raw = TrainConfig { igl_normalized: false, ..tc.clone() };
    type Pick = fn(&BatchLoss) -> Option<NodeId>;
    let picks: [(&str, &TrainConfig, Pick); 5] = [
        ("ccl", &tc, |l| Some(l.ccl)),
        ("igl", &tc, |l| l.igl),
        ("igl_raw", &raw, |l| l.igl),
        ("gen", &tc, |l| l.gen),
        ("combined", &tc, |l| Some(l.total)),
    ];
    picks
        .iter()
        .map(|&(name, tc, pick)| {
            finite_difference_check(name, &params.tensors, epsilon, GRADCHECK_TOLERANCE, |g, p| {
                let l = batch_loss_with(g, p, &model, tc, &batch, &collection, None, Some(&targets))?;
                pick(&l).ok_or_else(|| invalid!("loss {name} not built"))
            })
        })
        .collect()
}

pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (crate::corpus::Corpus, Vocab) {
        let corpus = generate(&GenConfig {
            n_topics: 20,
            passages_per_topic: 4,
            n_conversations: 20,
            turns_min: 2,
            turns_max: 4,
            seed: 3,
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

    fn tiny_model(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 128,
            ff_mult: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.ablation.ccl_on = false;
        assert!(c.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        let w = TrainConfig { ablation: Ablation::CCL_ONLY, ..Default::default() }.effective_weights();
        assert_eq!((w.lambda_igl, w.lambda_g), (0.0, 0.0));
    }

    #[test]
    fn shared_prefix_pooling_matches_separate_pass() {
        let (corpus, vocab) = small();
        let m = tiny_model(&vocab);
        let params = ModelParams::<f64>::init(&m, 1).unwrap();
        let s = Sampler::new(&vocab, &corpus.passages, m.context_len, 2, SamplingMode::Dynamic);
        let inst = s.instance_from(&corpus.conversations[0], 2, 1).unwrap();
        let mut g = Graph::new();
        let nodes = params.attach(&mut g, false);
        let packed = forward_packed(&mut g, &m, &nodes, &[&inst.gen_ids, &inst.dialogue.ids], None).unwrap();
        let (a, b) = inst.dialogue.current_query_span;
        let pooled = g.segment_mean(packed.hidden, &[packed.rows(0, (a, b)), packed.rows(1, (a, b))]).unwrap();
        let v = g.value(pooled);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn ablated_total_equals_ccl() {
        let (corpus, vocab) = small();
        let m = tiny_model(&vocab);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            ablation: Ablation::CCL_ONLY,
            ..Default::default()
        };
        let mut logs = Vec::new();
        train(&corpus.passages, &corpus.conversations, &vocab, &m, &tc, &NoClock, &mut |l| logs.push(l.clone())).unwrap();
        assert!(!logs.is_empty());
        for l in &logs {
            assert_eq!(l.losses.l_total, l.losses.l_ccl);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_identity() {
        let (corpus, vocab) = small();
        let m = tiny_model(&vocab);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut logs = Vec::new();
            let p = train(&corpus.passages, &corpus.conversations, &vocab, &m, &tc, &NoClock, &mut |l| logs.push(l.clone())).unwrap();
            (p, logs)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        let w = tc.effective_weights();
        assert!(l1.iter().all(|l| l.losses.identity_holds(&w, 1e-9) && l.losses.is_finite()));
        assert!(l1.iter().all(|l| l.losses.l_g > 0.0 && l.losses.l_igl > 0.0));
    }

    #[test]
    fn graph_total_agrees_with_breakdown() {
        let (corpus, vocab) = small();
        let m = tiny_model(&vocab);
        let s = Sampler::new(&vocab, &corpus.passages, m.context_len, 4, SamplingMode::Dynamic);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = s.build_epoch(&corpus.conversations, &mut rng, 6).unwrap().remove(0);
        let collection = EncodedCollection::new(&corpus.passages, &vocab, m.context_len).unwrap();
        let params = ModelParams::<f32>::init(&m, 4).unwrap();
        let tc = TrainConfig::default();
        let mut g = Graph::new();
        let nodes = params.attach(&mut g, true);
        let loss = batch_loss(&mut g, &nodes, &m, &tc, &batch, &collection, None).unwrap();
        let b = loss.breakdown(&g, &tc.effective_weights());
        assert!((g.value(loss.total).item() as f64 - b.l_total).abs() < 1e-5);
    }

    #[test]
    fn model_loss_gradients_match_finite_differences() {
        for seed in 1..=3 {
            let reports = gradient_check_suite(seed).unwrap();
            assert_eq!(reports.len(), 5);
            for r in reports {
                assert!(r.passed, "seed {seed}: {r:?}");
            }
        }
    }
}

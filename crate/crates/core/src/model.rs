//! Tiny decoder-only causal transformer.
//!
//! Pre-layer-norm blocks with learned absolute positions and a final layer
//! norm. Several sequences are packed into one `[total_tokens × d_model]`
//! matrix per forward pass; attention is confined to each sequence.
//! Retrieval embeddings are means of final hidden states over a token range:
//! the current-query span for dialogues, the content tokens for passages.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{EncodedDialogue, SPECIAL_TOKENS};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// LM head shares the token embedding matrix.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
            ff_mult: 4,
            dropout: 0.0,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_len == 0 || self.ff_mult == 0 {
            return bad("context_len and ff_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }

    /// Names and shapes of every parameter tensor, in declaration order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.ff_dim();
        let mut specs = vec![
            ("tok_emb".into(), vec![self.vocab_size, d]),
            ("pos_emb".into(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            specs.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.w_out"), vec![d, d]),
                (p("attn.b_out"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("ff.w_in"), vec![d, f]),
                (p("ff.b_in"), vec![f]),
                (p("ff.w_out"), vec![f, d]),
                (p("ff.b_out"), vec![d]),
            ]);
        }
        specs.push(("ln_f.gamma".into(), vec![d]));
        specs.push(("ln_f.beta".into(), vec![d]));
        if !self.tie_embeddings {
            specs.push(("lm_head".into(), vec![self.vocab_size, d]));
        }
        specs
    }

    pub fn n_params(&self) -> usize {
        self.param_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

const LAYER_TENSORS: usize = 11;
const INIT_STD: f64 = 0.02;

/// Which hidden states are averaged into a dialogue's retrieval embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Pooling {
    /// Only the current query's tokens.
    #[default]
    QueryFocused,
    /// Every token of the encoded dialogue.
    FullSequence,
}

impl Pooling {
    pub fn range(self, d: &EncodedDialogue) -> (usize, usize) {
        match self {
            Pooling::QueryFocused => d.current_query_span,
            Pooling::FullSequence => (0, d.total_len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use num_traits::Float;
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    Float::sqrt(-2.0 * Float::ln(u1)) * Float::cos(core::f64::consts::TAU * u2)
}

impl<T: Scalar> ModelParams<T> {
    /// Gaussian weights, unit layer-norm gains, zero biases; residual
    /// output projections are scaled down by `sqrt(2 * n_layers)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid = INIT_STD / num_traits::Float::sqrt((2 * config.n_layers.max(1)) as f64);
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with("gamma") {
                    vec![T::one(); n]
                } else if name.ends_with("beta") || name.contains(".b_") {
                    vec![T::zero(); n]
                } else {
                    let std = if name.ends_with("w_out") { resid } else { INIT_STD };
                    (0..n).map(|_| T::from_f64(normal(&mut rng) * std)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Builds from tensors in declaration order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(invalid!("expected {} tensors, got {}", specs.len(), tensors.len()));
        }
        for ((name, shape), t) in specs.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "model params",
                    detail: format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor on `g`: trainable leaves if `trainable`,
    /// constants otherwise.
    pub fn attach(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Hidden states of several sequences packed row-wise.
#[derive(Debug, Clone)]
pub struct Packed {
    pub hidden: NodeId,
    /// First row of each sequence.
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packed {
    /// Absolute row range for `(start, end)` local to sequence `seq`.
    pub fn rows(&self, seq: usize, local: (usize, usize)) -> (usize, usize) {
        (self.offsets[seq] + local.0, self.offsets[seq] + local.1)
    }
}

fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.gen_bool(p) { T::zero() } else { keep }).collect()
}

/// Runs the transformer over `seqs` packed together.
///
/// `params` are the nodes returned by [`ModelParams::attach`]. Dropout is
/// applied only when `dropout_rng` is given and the configured rate is
/// positive.
pub fn forward_packed<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &[NodeId],
    seqs: &[&[u32]],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Packed> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut offsets = Vec::with_capacity(seqs.len());
    let mut lens = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(invalid!("empty sequence"));
        }
        if s.len() > config.context_len {
            return Err(Error::ContextOverflow { len: s.len(), max: config.context_len });
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfRange(bad));
        }
        offsets.push(ids.len());
        lens.push(s.len());
        ids.extend_from_slice(s);
        positions.extend(0..s.len() as u32);
    }
    let segments: Vec<(usize, usize)> = offsets.iter().copied().zip(lens.iter().copied()).collect();
    let p = config.dropout;
    let tok = g.gather(params[0], &ids)?;
    let pos = g.gather(params[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..config.n_layers {
        let w = &params[2 + l * LAYER_TENSORS..2 + (l + 1) * LAYER_TENSORS];
        let h = g.layer_norm(x, w[0], w[1])?;
        let qkv = g.matmul(h, w[2])?;
        let a = g.causal_attention(qkv, &segments, config.n_heads)?;
        let o = g.matmul(a, w[3])?;
        let mut o = g.add_row(o, w[4])?;
        if let (Some(rng), true) = (dropout_rng.as_deref_mut(), p > 0.0) {
            let mask = dropout_mask(g.value(o).numel(), p, rng);
            o = g.dropout(o, mask)?;
        }
        x = g.add(x, o)?;
        let h = g.layer_norm(x, w[5], w[6])?;
        let f = g.matmul(h, w[7])?;
        let f = g.add_row(f, w[8])?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w[9])?;
        let mut f = g.add_row(f, w[10])?;
        if let (Some(rng), true) = (dropout_rng.as_deref_mut(), p > 0.0) {
            let mask = dropout_mask(g.value(f).numel(), p, rng);
            f = g.dropout(f, mask)?;
        }
        x = g.add(x, f)?;
    }
    let lnf = 2 + config.n_layers * LAYER_TENSORS;
    let hidden = g.layer_norm(x, params[lnf], params[lnf + 1])?;
    Ok(Packed { hidden, offsets, lens })
}

/// Next-token logits for the given hidden rows.
pub fn lm_logits<T: Scalar>(g: &mut Graph<T>, config: &ModelConfig, params: &[NodeId], hidden_rows: NodeId) -> Result<NodeId> {
    let head = if config.tie_embeddings { params[0] } else { params[params.len() - 1] };
    g.matmul_bt(hidden_rows, head)
}

/// Final hidden states `[N × d]` and logits `[N × vocab]` of one sequence,
/// in evaluation mode.
pub fn forward<T: Scalar>(ids: &[u32], params: &ModelParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, false);
    let packed = forward_packed(&mut g, &params.config, &nodes, &[ids], None)?;
    let logits = lm_logits(&mut g, &params.config, &nodes, packed.hidden)?;
    Ok((g.value(packed.hidden).clone(), g.value(logits).clone()))
}

/// Mean of the last `m` rows of `hidden`.
pub fn extract_query_embedding<T: Scalar>(hidden: &Tensor<T>, m: usize) -> Result<Vec<T>> {
    if hidden.rank() != 2 {
        return Err(invalid!("hidden states must be a matrix"));
    }
    let n = hidden.rows();
    if m == 0 || m > n {
        return Err(invalid!("pooling length {m} outside 1..={n}"));
    }
    Ok(mean_rows(hidden, n - m, n))
}

fn mean_rows<T: Scalar>(hidden: &Tensor<T>, start: usize, end: usize) -> Vec<T> {
    let mut out = vec![T::zero(); hidden.cols()];
    for r in start..end {
        for (o, &v) in out.iter_mut().zip(hidden.row(r)) {
            *o = *o + v;
        }
    }
    let inv = T::one() / T::from_f64((end - start) as f64);
    out.iter_mut().for_each(|o| *o = *o * inv);
    out
}

/// Unnormalized passage embedding: mean over its content tokens.
pub fn embed_passage<T: Scalar>(passage: &EncodedDialogue, params: &ModelParams<T>) -> Result<Vec<T>> {
    Ok(embed_batch(params, &[passage], Pooling::QueryFocused)?.remove(0))
}

/// Sequences per packed inference pass.
const INFERENCE_CHUNK: usize = 64;

/// Pooled embeddings for many encoded sequences. `Pooling::QueryFocused`
/// averages each sequence's stored span, which for passages is the whole
/// content.
pub fn embed_batch<T: Scalar>(params: &ModelParams<T>, seqs: &[&EncodedDialogue], pooling: Pooling) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(INFERENCE_CHUNK) {
        let mut g = Graph::new();
        let nodes = params.attach(&mut g, false);
        let ids: Vec<&[u32]> = chunk.iter().map(|d| d.ids.as_slice()).collect();
        let packed = forward_packed(&mut g, &params.config, &nodes, &ids, None)?;
        let ranges: Vec<_> = chunk.iter().enumerate().map(|(i, d)| packed.rows(i, pooling.range(d))).collect();
        let pooled = g.segment_mean(packed.hidden, &ranges)?;
        let v = g.value(pooled);
        out.extend((0..chunk.len()).map(|r| v.row(r).to_vec()));
    }
    Ok(out)
}

/// Greedy decoding. Stops before the first special token or after
/// `max_new` tokens; ties go to the lowest id.
pub fn generate_greedy<T: Scalar>(prompt: &[u32], params: &ModelParams<T>, max_new: usize) -> Result<Vec<u32>> {
    if prompt.len() + max_new > params.config.context_len {
        return Err(Error::ContextOverflow {
            len: prompt.len() + max_new,
            max: params.config.context_len,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let mut g = Graph::new();
        let nodes = params.attach(&mut g, false);
        let packed = forward_packed(&mut g, &params.config, &nodes, &[&seq], None)?;
        let last = g.gather(packed.hidden, &[(seq.len() - 1) as u32])?;
        let logits = lm_logits(&mut g, &params.config, &nodes, last)?;
        let row = g.value(logits).data();
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let best = best as u32;
        if (best as usize) < SPECIAL_TOKENS.len() {
            break;
        }
        seq.push(best);
        out.push(best);
    }
    Ok(out)
}

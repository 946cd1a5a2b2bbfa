//! Training objectives.
//!
//! Each objective exists twice: as a plain `f64` function over slices (the
//! reference semantics, used by tests and reports) and as a graph builder
//! that the trainer differentiates.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::graph::{CrossEntropySpec, Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_igl: f64,
    pub lambda_g: f64,
    /// Temperature of the contrastive similarity.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_igl: 1.0,
            lambda_g: 0.2,
            tau: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_igl >= 0.0 && self.lambda_igl.is_finite()) {
            return Err(Error::Config(alloc::format!("lambda_igl must be >= 0, got {}", self.lambda_igl)));
        }
        if !(0.0..=1.0).contains(&self.lambda_g) {
            return Err(Error::Config(alloc::format!("lambda_g must lie in [0, 1], got {}", self.lambda_g)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(alloc::format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_ccl: f64,
    pub l_igl: f64,
    pub l_g: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_ccl: f64, l_igl: f64, l_g: f64, weights: &LossWeights) -> Self {
        Self {
            l_ccl,
            l_igl,
            l_g,
            l_total: combined_loss(l_ccl, l_igl, l_g, weights),
        }
    }

    /// Whether `l_total` agrees with the weighted combination within `tol`.
    pub fn identity_holds(&self, weights: &LossWeights, tol: f64) -> bool {
        (self.l_total - combined_loss(self.l_ccl, self.l_igl, self.l_g, weights)).abs() <= tol
    }

    pub fn is_finite(&self) -> bool {
        self.l_ccl.is_finite() && self.l_igl.is_finite() && self.l_g.is_finite() && self.l_total.is_finite()
    }
}

/// How query and passage embeddings are compared inside the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Similarity {
    /// Dot product of L2-normalized embeddings.
    #[default]
    Cosine,
    /// Raw dot product.
    Dot,
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("dimension mismatch: {} vs {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid!("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `-log(f(q,pos) / (f(q,pos) + Σ f(q,neg)))` with `f = exp(cos/τ)`.
pub fn ccl_loss(e_q: &[f64], e_pos: &[f64], e_negs: &[&[f64]], tau: f64) -> Result<f64> {
    if e_negs.is_empty() {
        return Err(invalid!("contrastive loss needs at least one negative"));
    }
    if !(tau > 0.0) {
        return Err(invalid!("tau must be positive, got {tau}"));
    }
    let mut s = Vec::with_capacity(e_negs.len() + 1);
    s.push(cosine_sim(e_q, e_pos)? / tau);
    for n in e_negs {
        s.push(cosine_sim(e_q, n)? / tau);
    }
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - s[0])
}

/// Squared Euclidean distance.
pub fn igl_loss(e_q: &[f64], e_rewrite: &[f64]) -> Result<f64> {
    if e_q.len() != e_rewrite.len() {
        return Err(invalid!("dimension mismatch: {} vs {}", e_q.len(), e_rewrite.len()));
    }
    Ok(e_q.iter().zip(e_rewrite).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean NLL of `target_ids[j]` under `logits` row `j`, over masked rows.
pub fn gen_loss(logits: &Tensor<f64>, target_ids: &[u32], response_mask: &[bool]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != target_ids.len() || target_ids.len() != response_mask.len() {
        return Err(invalid!("logits, targets and mask must have one entry per position"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (j, (&t, &m)) in target_ids.iter().zip(response_mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(j);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::TokenOutOfRange(t as u32));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(invalid!("generation loss over an empty mask"));
    }
    Ok(total / count as f64)
}

/// `(1 − λ_G)(l_ccl + λ_IGL·l_igl) + λ_G·l_g`
pub fn combined_loss(l_ccl: f64, l_igl: f64, l_g: f64, w: &LossWeights) -> f64 {
    (1.0 - w.lambda_g) * (l_ccl + w.lambda_igl * l_igl) + w.lambda_g * l_g
}

/// Batched contrastive loss on the graph.
///
/// `queries` is `[B × d]`, `passages` `[C × d]`. Row `i` uses
/// `candidates[i]` as its softmax support and `positives[i]` (which must be
/// in that list) as its target. The result is the mean over rows.
pub fn ccl_graph<T: Scalar>(
    g: &mut Graph<T>,
    queries: NodeId,
    passages: NodeId,
    positives: &[usize],
    candidates: Vec<Vec<usize>>,
    tau: f64,
    similarity: Similarity,
) -> Result<NodeId> {
    let (q, p) = match similarity {
        Similarity::Cosine => (g.normalize_rows(queries)?, g.normalize_rows(passages)?),
        Similarity::Dot => (queries, passages),
    };
    let s = g.matmul_bt(q, p)?;
    let s = g.scale(s, 1.0 / tau)?;
    g.cross_entropy(
        s,
        CrossEntropySpec {
            rows: (0..positives.len()).collect(),
            targets: positives.to_vec(),
            candidates: Some(candidates),
        },
    )
}

/// Mean over rows of `‖q − r‖²`. Unless `two_sided`, the rewrite branch is
/// detached and receives no gradient.
pub fn igl_graph<T: Scalar>(g: &mut Graph<T>, queries: NodeId, rewrites: NodeId, two_sided: bool) -> Result<NodeId> {
    let target = if two_sided { rewrites } else { g.detach(rewrites) };
    let diff = g.sub(queries, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    let rows = g.value(queries).rows();
    g.scale(total, 1.0 / rows as f64)
}

/// Mean NLL over every row of `logits` (the caller gathers only the rows
/// that predict response tokens).
pub fn gen_graph<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
    g.cross_entropy(
        logits,
        CrossEntropySpec {
            rows: (0..targets.len()).collect(),
            targets: targets.iter().map(|&t| t as usize).collect(),
            candidates: None,
        },
    )
}

/// Weighted sum on the graph. Absent components contribute zero.
pub fn combined_graph<T: Scalar>(
    g: &mut Graph<T>,
    ccl: NodeId,
    igl: Option<NodeId>,
    gen: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut retrieval = ccl;
    if let Some(i) = igl {
        let i = g.scale(i, w.lambda_igl)?;
        retrieval = g.add(retrieval, i)?;
    }
    let mut total = g.scale(retrieval, 1.0 - w.lambda_g)?;
    if let Some(gen) = gen {
        let gen = g.scale(gen, w.lambda_g)?;
        total = g.add(total, gen)?;
    }
    Ok(total)
}

//! Passage embedding store and exact cosine top-k search.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::Passage;
use crate::error::{invalid, Error, Result};
use crate::model::{embed_batch, ModelParams, Pooling};
use crate::tensor::Scalar;
use crate::tokenizer::{encode_passage, Vocab};

/// Row norms of a stored matrix must be within this of 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

/// Top-k passages, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedResult {
    pub entries: Vec<(String, f64)>,
}

fn l2(v: &[f32]) -> f64 {
    num_traits::Float::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum::<f64>())
}

impl EmbeddingStore {
    /// L2-normalizes every row.
    pub fn from_embeddings(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(invalid!("{} ids for {} rows", ids.len(), rows.len()));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, r) in ids.iter().zip(rows) {
            if r.len() != dim {
                return Err(Error::Shape {
                    op: "embedding store",
                    detail: format!("row {id} has dim {} but store dim is {dim}", r.len()),
                });
            }
            let n = l2(r);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::NonFinite(format!("embedding of {id} cannot be normalized")));
            }
            data.extend(r.iter().map(|&x| (x as f64 / n) as f32));
        }
        Self::from_raw(ids, dim, data)
    }

    /// Takes already-normalized rows, checking every invariant.
    pub fn from_raw(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Shape {
                op: "embedding store",
                detail: format!("{} values for {} rows of dim {dim}", data.len(), ids.len()),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(invalid!("duplicate passage id {id} in store"));
            }
        }
        if dim > 0 {
            for (id, row) in ids.iter().zip(data.chunks(dim)) {
                let n = l2(row);
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return Err(invalid!("row {id} has norm {n}, expected 1"));
                }
            }
        }
        Ok(Self { ids, dim, data })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine score of every row against `query`, in row order.
    ///
    /// Scores are accumulated left to right in `f64` against the
    /// normalized query.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::Shape {
                op: "search",
                detail: format!("query dim {} vs store dim {}", query.len(), self.dim),
            });
        }
        let n = l2(query);
        if !(n > 0.0) || !n.is_finite() {
            return Err(invalid!("query vector is zero or non-finite"));
        }
        let q: Vec<f64> = query.iter().map(|&x| x as f64 / n).collect();
        Ok((0..self.len())
            .map(|i| {
                let mut s = 0.0;
                for (a, b) in self.row(i).iter().zip(&q) {
                    s += *a as f64 * b;
                }
                s
            })
            .collect())
    }

    /// Exact top-k by cosine; ties go to the smaller passage id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<RankedResult> {
        if k == 0 {
            return Err(invalid!("k must be at least 1"));
        }
        let scores = self.scores(query)?;
        let cmp = |a: &usize, b: &usize| -> Ordering {
            scores[*b].total_cmp(&scores[*a]).then_with(|| self.ids[*a].cmp(&self.ids[*b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(RankedResult {
            entries: order.into_iter().map(|i| (self.ids[i].clone(), scores[i])).collect(),
        })
    }
}

/// Embeds and normalizes every passage, in collection order.
pub fn build_store<T: Scalar>(passages: &[Passage], vocab: &Vocab, params: &ModelParams<T>) -> Result<EmbeddingStore> {
    let encoded = passages
        .iter()
        .map(|p| {
            encode_passage(&p.text, vocab, params.config.context_len).map_err(|e| match e {
                Error::ContextOverflow { len, max } => invalid!("passage {} has {len} tokens, context is {max}", p.id),
                other => invalid!("passage {}: {other}", p.id),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = encoded.iter().collect();
    let rows: Vec<Vec<f32>> = embed_batch(params, &refs, Pooling::QueryFocused)?
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.as_f64() as f32).collect())
        .collect();
    EmbeddingStore::from_embeddings(passages.iter().map(|p| p.id.clone()).collect(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:06}")).collect()
    }

    fn random_store(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingStore {
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        EmbeddingStore::from_embeddings(ids(n), &rows).unwrap()
    }

    #[test]
    fn unit_vectors_example() {
        let s = EmbeddingStore::from_embeddings(vec!["p1".into(), "p2".into()], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = s.search(&[1.0, 0.0], 1).unwrap();
        assert_eq!(r.entries, vec![("p1".into(), 1.0)]);
        let all = s.search(&[1.0, 0.0], 10).unwrap();
        assert_eq!(all.entries.len(), 2);
        assert!(s.search(&[0.0, 0.0], 1).is_err());
        assert!(s.search(&[1.0], 1).is_err());
        assert!(s.search(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let s = EmbeddingStore::from_embeddings(vec!["b".into(), "a".into(), "c".into()], &[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let r = s.search(&[2.0], 3).unwrap();
        let got: Vec<&str> = r.entries.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(got, ["a", "b", "c"]);
    }

    #[test]
    fn invariants_are_checked() {
        assert!(EmbeddingStore::from_embeddings(vec!["a".into(), "a".into()], &[vec![1.0], vec![1.0]]).is_err());
        assert!(EmbeddingStore::from_embeddings(vec!["a".into()], &[vec![0.0, 0.0]]).is_err());
        assert!(EmbeddingStore::from_raw(vec!["a".into()], 2, vec![1.0, 1.0]).is_err());
        assert!(EmbeddingStore::from_raw(vec!["a".into()], 2, vec![1.0]).is_err());
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let s = random_store(&mut rng, 300, 16);
            let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = q.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            let mut oracle: Vec<(String, f64)> = (0..s.len())
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..16 {
                        acc += s.row(i)[j] as f64 * (q[j] as f64 / n);
                    }
                    (s.ids()[i].clone(), acc)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for k in [1, 7, 300, 500] {
                assert_eq!(s.search(&q, k).unwrap().entries, oracle[..k.min(300)].to_vec());
            }
        }
    }

    proptest! {
        #[test]
        fn search_k_is_prefix_of_k_plus_one(seed in 0u64..1000, k in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_store(&mut rng, 50, 4);
            let q: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = s.search(&q, k).unwrap().entries;
            let b = s.search(&q, k + 1).unwrap().entries;
            prop_assert_eq!(&a[..], &b[..a.len()]);
            for (_, sc) in &b {
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(sc));
            }
            for w in b.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }
    }
}

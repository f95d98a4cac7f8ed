//! Exact cosine top-k search over a precomputed gallery, and recall@k.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{unit_norm_tol, EmbeddingBatch};
use crate::numerics::{dot, Matrix};
use crate::scalar::Scalar;

/// Default cutoffs for recall reports.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Gallery of unit-norm embeddings addressed by string id.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex<T> {
    ids: Vec<String>,
    embeddings: Matrix<T>,
    positions: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit<T> {
    pub id: String,
    pub score: T,
}

impl<T: Scalar> RetrievalIndex<T> {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }
}

/// Builds an index over rows of `embeddings`, one id per row.
pub fn build_index<T: Scalar>(ids: Vec<String>, embeddings: Matrix<T>) -> Result<RetrievalIndex<T>> {
    if ids.len() != embeddings.rows() {
        return Err(Error::shape("build_index ids", embeddings.rows(), ids.len()));
    }
    for (row, norm) in embeddings.row_norms().into_iter().enumerate() {
        let norm = norm.widen();
        if !((norm - 1.0).abs() <= unit_norm_tol::<T>()) {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    let mut positions = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if positions.insert(id.clone(), i).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(RetrievalIndex {
        ids,
        embeddings,
        positions,
    })
}

/// Convenience wrapper taking an [`EmbeddingBatch`].
pub fn build_index_from_batch<T: Scalar>(ids: Vec<String>, batch: &EmbeddingBatch<T>) -> Result<RetrievalIndex<T>> {
    build_index(ids, batch.matrix().clone())
}

/// Descending score, then ascending id.
fn rank_order<T: Scalar>(a: (&str, T), b: (&str, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0))
}

/// The `k` best gallery items for `query` by dot product, best first.
pub fn topk<T: Scalar>(index: &RetrievalIndex<T>, query: &[T], k: usize) -> Result<Vec<Hit<T>>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if query.len() != index.dim() {
        return Err(Error::shape("topk query", index.dim(), query.len()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let norm = dot(query, query).sqrt().widen();
    if !((norm - 1.0).abs() <= unit_norm_tol::<T>()) {
        return Err(Error::NotNormalized { row: 0, norm });
    }
    let mut scored: Vec<(usize, T)> = index
        .embeddings
        .row_iter()
        .enumerate()
        .map(|(i, row)| (i, dot(row, query)))
        .collect();
    let cmp = |a: &(usize, T), b: &(usize, T)| rank_order((&index.ids[a.0], a.1), (&index.ids[b.0], b.1));
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(i, score)| Hit {
            id: index.ids[i].clone(),
            score,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k_values: Vec<usize>,
    /// Keyed by k.
    pub recalls: BTreeMap<usize, f64>,
    pub num_queries: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recalls.get(&k).copied()
    }
}

/// Fraction of queries whose ground-truth id is among their top-k results.
pub fn recall_at_k<T: Scalar>(
    index: &RetrievalIndex<T>,
    queries: &EmbeddingBatch<T>,
    ground_truth: &[String],
    ks: &[usize],
) -> Result<RecallReport> {
    let q = queries.matrix();
    if ground_truth.len() != q.rows() {
        return Err(Error::shape("recall_at_k ground truth", q.rows(), ground_truth.len()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("k values must be >= 1".into()));
    }
    let truth_pos = ground_truth
        .iter()
        .map(|id| index.position(id).ok_or_else(|| Error::UnknownGroundTruthId(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if q.cols() != index.dim() {
        return Err(Error::shape("recall_at_k query width", index.dim(), q.cols()));
    }

    // Rank of the truth item = number of items ordered strictly before it,
    // which avoids sorting the gallery per query.
    let mut hits = vec![0usize; ks.len()];
    for (qi, &truth) in truth_pos.iter().enumerate() {
        let query = q.row(qi);
        let truth_score = dot(index.embeddings.row(truth), query);
        let truth_id = index.ids[truth].as_str();
        let ahead = index
            .embeddings
            .row_iter()
            .enumerate()
            .filter(|&(i, row)| {
                i != truth && rank_order((&index.ids[i], dot(row, query)), (truth_id, truth_score)) == Ordering::Less
            })
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if ahead < k {
                *h += 1;
            }
        }
    }
    let n = q.rows() as f64;
    Ok(RecallReport {
        k_values: ks.to_vec(),
        recalls: ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, if q.rows() == 0 { 0.0 } else { h as f64 / n }))
            .collect(),
        num_queries: q.rows(),
    })
}

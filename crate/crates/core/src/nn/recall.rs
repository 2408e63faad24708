use super::{exact_topk_unchecked, Neighbor, NeighborBackend};
use crate::error::{Error, Result};

/// Accuracy of one backend against another over a query set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallReport {
    pub queries: usize,
    pub k: usize,
    /// Fraction of queries whose first result matches the oracle's.
    pub recall_at_1: f64,
    /// Mean fraction of the oracle's top-k found in the backend's top-k.
    pub recall_at_k: f64,
    /// Mean candidate-set size over memory size.
    pub candidate_fraction: f64,
}

fn batch_top_k(
    backend: &NeighborBackend,
    keys: &[f32],
    dim: usize,
    queries: &[f32],
    k: usize,
) -> Result<Vec<Vec<Neighbor>>> {
    match backend {
        NeighborBackend::Exact => Ok(exact_topk_unchecked(queries, keys, dim, k)),
        NeighborBackend::Lsh(_) => queries
            .chunks_exact(dim)
            .map(|q| backend.top_k(keys, dim, q, k))
            .collect(),
    }
}

/// Compares `backend` against `oracle` on the same key matrix.
pub fn recall_eval(
    backend: &NeighborBackend,
    oracle: &NeighborBackend,
    keys: &[f32],
    dim: usize,
    queries: &[f32],
    k: usize,
) -> Result<RecallReport> {
    if dim == 0 || queries.len() % dim != 0 || keys.len() % dim != 0 {
        return Err(Error::Precondition("matrix widths do not match".into()));
    }
    let rows = keys.len() / dim;
    if k == 0 || k > rows {
        return Err(Error::Precondition(format!("k = {k} invalid for {rows} slots")));
    }
    let got = batch_top_k(backend, keys, dim, queries, k)?;
    let want = batch_top_k(oracle, keys, dim, queries, k)?;
    let n = got.len();
    if n == 0 {
        return Ok(RecallReport {
            queries: 0,
            k,
            recall_at_1: 1.0,
            recall_at_k: 1.0,
            candidate_fraction: 0.0,
        });
    }
    let mut hits1 = 0usize;
    let mut hits_k = 0.0;
    let mut cand = 0.0;
    for ((g, w), q) in got.iter().zip(&want).zip(queries.chunks_exact(dim)) {
        if g.first().map(|x| x.index) == w.first().map(|x| x.index) {
            hits1 += 1;
        }
        let found = w
            .iter()
            .filter(|o| g.iter().any(|x| x.index == o.index))
            .count();
        hits_k += found as f64 / w.len() as f64;
        cand += backend.candidate_count(rows, q, k) as f64 / rows as f64;
    }
    Ok(RecallReport {
        queries: n,
        k,
        recall_at_1: hits1 as f64 / n as f64,
        recall_at_k: hits_k / n as f64,
        candidate_fraction: cand / n as f64,
    })
}

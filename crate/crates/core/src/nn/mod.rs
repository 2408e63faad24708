//! Top-k maximum inner product search over unit-norm key rows.
//!
//! Two interchangeable backends are provided behind [`NeighborBackend`]:
//! an exact blocked scan and a random-hyperplane LSH index that restricts the
//! scan to a candidate set. Both rank by descending similarity and break ties
//! by ascending slot index.

mod exact;
mod lsh;
mod recall;

use std::cmp::Ordering;

pub use exact::{dot, exact_topk, exact_topk_unchecked};
pub use lsh::{LshIndex, LshParams};
pub use recall::{recall_eval, RecallReport};

use crate::error::{Error, Result};

/// One retrieved slot and its similarity to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f32,
}

impl Neighbor {
    /// Total ranking order: higher similarity first, then lower slot index.
    pub fn rank_cmp(&self, other: &Neighbor) -> Ordering {
        other
            .similarity
            .total_cmp(&self.similarity)
            .then(self.index.cmp(&other.index))
    }
}

/// Neighbor search strategy used by a memory store.
///
/// The LSH variant owns an index that must see every key write; the memory
/// store forwards writes through [`NeighborBackend::on_write`].
#[derive(Debug, Clone, PartialEq)]
pub enum NeighborBackend {
    Exact,
    Lsh(LshIndex),
}

impl NeighborBackend {
    pub fn is_exact(&self) -> bool {
        matches!(self, NeighborBackend::Exact)
    }

    pub fn name(&self) -> &'static str {
        match self {
            NeighborBackend::Exact => "exact",
            NeighborBackend::Lsh(_) => "lsh",
        }
    }

    /// Top-k of `q` against the row-major `keys` matrix with rows of width `dim`.
    pub fn top_k(&self, keys: &[f32], dim: usize, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        let rows = keys.len() / dim.max(1);
        if k > rows {
            return Err(Error::Precondition(format!(
                "k = {k} exceeds memory size {rows}"
            )));
        }
        match self {
            NeighborBackend::Exact => Ok(exact_topk_unchecked(q, keys, dim, k)
                .pop()
                .unwrap_or_default()),
            NeighborBackend::Lsh(index) => {
                let candidates = index.candidates(q, k);
                Ok(select_top_k(
                    candidates.iter().map(|&i| Neighbor {
                        index: i,
                        similarity: dot(q, &keys[i * dim..(i + 1) * dim]),
                    }),
                    k,
                ))
            }
        }
    }

    /// Number of slots the backend scores for `q`.
    pub fn candidate_count(&self, rows: usize, q: &[f32], k: usize) -> usize {
        match self {
            NeighborBackend::Exact => rows,
            NeighborBackend::Lsh(index) => index.candidates(q, k).len(),
        }
    }

    /// Keeps backend state in lockstep with a key write.
    pub fn on_write(&mut self, slot: usize, key: &[f32]) {
        if let NeighborBackend::Lsh(index) = self {
            index.write(slot, key);
        }
    }
}

/// Selects the best `k` neighbors from an arbitrary stream, in rank order.
pub fn select_top_k(items: impl IntoIterator<Item = Neighbor>, k: usize) -> Vec<Neighbor> {
    let mut collector = TopK::new(k);
    for n in items {
        collector.push(n);
    }
    collector.into_sorted()
}

/// Collector keeping the `k` best neighbors seen so far.
///
/// Accepted neighbors are buffered and cut back to `k` by selection whenever
/// the buffer doubles, so each push is amortized O(1).
pub(crate) struct TopK {
    k: usize,
    buf: Vec<Neighbor>,
    /// Worst kept neighbor after the last cut.
    boundary: Option<Neighbor>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            buf: Vec::new(),
            boundary: None,
        }
    }

    /// Similarity below which nothing can enter.
    #[inline]
    pub(crate) fn threshold(&self) -> f32 {
        self.boundary.map_or(f32::NEG_INFINITY, |b| b.similarity)
    }

    #[inline]
    pub(crate) fn push(&mut self, n: Neighbor) {
        if self.k == 0 {
            return;
        }
        if let Some(b) = self.boundary {
            if n.rank_cmp(&b) != Ordering::Less {
                return;
            }
        }
        self.buf.push(n);
        if self.buf.len() >= 2 * self.k.max(16) {
            self.cut();
        }
    }

    fn cut(&mut self) {
        if self.buf.len() > self.k {
            self.buf.select_nth_unstable_by(self.k - 1, Neighbor::rank_cmp);
            self.buf.truncate(self.k);
            self.boundary = Some(self.buf[self.k - 1]);
        }
    }

    pub(crate) fn into_sorted(mut self) -> Vec<Neighbor> {
        self.buf.sort_unstable_by(Neighbor::rank_cmp);
        self.buf.truncate(self.k);
        self.buf
    }
}

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;

use super::EmbeddingStore;

/// A scored row. Orders by score, then prefers the lower row on ties, so the
/// greatest `Hit` is the best one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub score: f64,
}

impl Eq for Hit {}

impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.row.cmp(&self.row))
    }
}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Exact top-`k` rows by inner product, best first, ties to the lower row.
/// Asking for more rows than the store holds returns them all with a warning.
pub fn top_k(store: &EmbeddingStore, query: &[f32], k: usize) -> Vec<Hit> {
    assert!(k >= 1, "k must be at least 1");
    let k = if k > store.len() {
        log::warn!("top-{k} requested from a store of {} rows", store.len());
        store.len()
    } else {
        k
    };
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Reverse<Hit>> = BinaryHeap::with_capacity(k + 1);
    for row in 0..store.len() {
        let hit = Hit {
            row,
            score: dot(store.row(row), query),
        };
        if heap.len() < k {
            heap.push(Reverse(hit));
        } else if hit > heap.peek().expect("heap is full").0 {
            heap.pop();
            heap.push(Reverse(hit));
        }
    }
    let mut out: Vec<Hit> = heap.into_iter().map(|r| r.0).collect();
    out.sort_unstable_by(|a, b| b.cmp(a));
    out
}

/// [`top_k`] for many queries, in parallel, results in query order.
pub fn top_k_batch(store: &EmbeddingStore, queries: &[Vec<f32>], k: usize) -> Vec<Vec<Hit>> {
    queries.par_iter().map(|q| top_k(store, q, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::SegmentRef;

    fn store(rows: &[[f64; 3]]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(3);
        for (k, r) in rows.iter().enumerate() {
            s.push(SegmentRef::state("t", k as u32 + 1), r).unwrap();
        }
        s.seal()
    }

    #[test]
    fn basis_query_finds_its_row() {
        let s = store(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let hits = top_k(&s, &[0.0, 0.0, 1.0], 1);
        assert_eq!(hits, [Hit { row: 2, score: 1.0 }]);
    }

    #[test]
    fn ties_go_to_lower_row() {
        let s = store(&[[0.0, 1.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.5, 0.0]]);
        let rows: Vec<usize> = top_k(&s, &[1.0, 1.0, 0.0], 3).iter().map(|h| h.row).collect();
        assert_eq!(rows, [0, 1, 2]);
        let rows: Vec<usize> = top_k(&s, &[1.0, 0.0, 0.0], 1).iter().map(|h| h.row).collect();
        assert_eq!(rows, [1]);
    }

    #[test]
    fn oversized_k_returns_everything() {
        let s = store(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(top_k(&s, &[1.0, 2.0, 0.0], 10).len(), 2);
    }
}

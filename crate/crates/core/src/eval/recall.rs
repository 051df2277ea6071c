use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{top_k, EmbeddingStore, EvalError};
use crate::pairs::{PoolKind, PoolSet, RetrievalPair, Split, Subtask};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Grouping key of a report row. `split` is `None` for unsplit pairs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub subtask: Subtask,
    pub source: String,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallRow {
    pub queries: usize,
    /// Hits per cutoff, aligned with the report's `ks`.
    pub hits: Vec<usize>,
}

impl RecallRow {
    pub fn recall(&self, cutoff: usize) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.hits[cutoff] as f64 / self.queries as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub rows: BTreeMap<GroupKey, RecallRow>,
}

pub fn split_name(split: Option<Split>) -> &'static str {
    split.map(Split::name).unwrap_or("all")
}

impl RecallReport {
    pub fn new(ks: &[usize]) -> Self {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        Self {
            ks,
            rows: BTreeMap::new(),
        }
    }

    /// Records one query whose positive ranked at 1-based `rank` (`None` when
    /// outside every cutoff).
    pub fn record(&mut self, key: GroupKey, rank: Option<usize>) {
        let n = self.ks.len();
        let row = self.rows.entry(key).or_insert_with(|| RecallRow {
            queries: 0,
            hits: vec![0; n],
        });
        row.queries += 1;
        if let Some(r) = rank {
            for (c, k) in self.ks.iter().enumerate() {
                if r <= *k {
                    row.hits[c] += 1;
                }
            }
        }
    }

    /// Totals over rows matching `filter`.
    pub fn aggregate(&self, filter: impl Fn(&GroupKey) -> bool) -> RecallRow {
        let mut out = RecallRow {
            queries: 0,
            hits: vec![0; self.ks.len()],
        };
        for (k, row) in &self.rows {
            if filter(k) {
                out.queries += row.queries;
                out.hits.iter_mut().zip(&row.hits).for_each(|(a, b)| *a += b);
            }
        }
        out
    }

    /// Every row satisfies `R@k1 <= R@k2` for `k1 < k2`.
    pub fn is_monotone(&self) -> bool {
        self.rows.values().all(|r| r.hits.windows(2).all(|w| w[0] <= w[1]))
    }

    fn sources(&self) -> BTreeSet<&str> {
        self.rows.keys().map(|k| k.source.as_str()).collect()
    }

    fn splits(&self) -> BTreeSet<Option<Split>> {
        self.rows.keys().map(|k| k.split).collect()
    }

    fn percent_cells(&self, row: &RecallRow, sep: char, out: &mut String) {
        for c in 0..self.ks.len() {
            if c > 0 {
                out.push(sep);
            }
            let _ = write!(out, "{:.1}", 100.0 * row.recall(c));
        }
    }

    /// One row per split, three columns per source (`R@k` in percent, one
    /// decimal), pooled over all subtasks of the source.
    pub fn overall_tsv(&self, method: &str) -> String {
        let sources = self.sources();
        let mut out = String::from("method\tsplit");
        for s in &sources {
            for k in &self.ks {
                let _ = write!(out, "\t{s} R@{k}");
            }
        }
        out.push('\n');
        for split in self.splits() {
            let _ = write!(out, "{method}\t{}", split_name(split));
            for s in &sources {
                let row = self.aggregate(|g| g.split == split && g.source == *s);
                out.push('\t');
                self.percent_cells(&row, '\t', &mut out);
            }
            out.push('\n');
        }
        out
    }

    /// For one split: a row per source and a `R@1/R@5/R@10` cell per subtask.
    pub fn subtask_tsv(&self, split: Option<Split>) -> String {
        let mut out = String::from("source");
        for s in Subtask::ALL {
            let _ = write!(out, "\t{}", s.notation());
        }
        out.push('\n');
        for source in self.sources() {
            out.push_str(source);
            for s in Subtask::ALL {
                out.push('\t');
                let key = GroupKey {
                    subtask: s,
                    source: source.to_string(),
                    split,
                };
                match self.rows.get(&key) {
                    Some(row) => self.percent_cells(row, '/', &mut out),
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Splits present in the report.
    pub fn split_list(&self) -> Vec<Option<Split>> {
        self.splits().into_iter().collect()
    }
}

/// Per-kind embedding stores built from the matching candidate pools.
#[derive(Debug, Clone)]
pub struct StoreSet {
    pub state: EmbeddingStore,
    pub trajectory: EmbeddingStore,
    pub interval: EmbeddingStore,
}

impl StoreSet {
    pub fn get(&self, kind: PoolKind) -> &EmbeddingStore {
        match kind {
            PoolKind::State => &self.state,
            PoolKind::Trajectory => &self.trajectory,
            PoolKind::Interval => &self.interval,
        }
    }
}

/// Recall@K of every pair: the pair's key embedding is searched against the
/// store of its subtask's value pool and the positive's rank recorded.
///
/// `key_embeddings[n]` belongs to `pairs[n]`; `source_of` maps a trajectory id
/// to its source.
pub fn recall_at_k(
    pairs: &[RetrievalPair],
    key_embeddings: &[Vec<f32>],
    pools: &PoolSet,
    stores: &StoreSet,
    source_of: &dyn Fn(&str) -> String,
    ks: &[usize],
) -> Result<RecallReport, EvalError> {
    if pairs.len() != key_embeddings.len() {
        return Err(EvalError::Format(format!(
            "{} pairs but {} key embeddings",
            pairs.len(),
            key_embeddings.len()
        )));
    }
    let mut report = RecallReport::new(ks);
    let kmax = *report.ks.last().ok_or_else(|| EvalError::Format("no cutoffs".into()))?;

    let mut positives = Vec::with_capacity(pairs.len());
    for (n, p) in pairs.iter().enumerate() {
        let kind = p.subtask.value_pool();
        let pool = pools.get(kind);
        let row = pool
            .resolve(&p.value_segment)
            .and_then(|r| stores.get(kind).lookup(&pool.members()[r]))
            .ok_or_else(|| EvalError::MissingPositive {
                pair: n,
                value: p.value_segment.clone(),
            })?;
        positives.push(row);
    }

    use rayon::prelude::*;
    let ranks: Vec<Option<usize>> = pairs
        .par_iter()
        .zip(key_embeddings)
        .zip(&positives)
        .map(|((p, q), &pos)| {
            let hits = top_k(stores.get(p.subtask.value_pool()), q, kmax);
            hits.iter().position(|h| h.row == pos).map(|r| r + 1)
        })
        .collect();

    for (p, rank) in pairs.iter().zip(ranks) {
        let key = GroupKey {
            subtask: p.subtask,
            source: source_of(p.trajectory_id()),
            split: p.split,
        };
        report.record(key, rank);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> GroupKey {
        GroupKey {
            subtask: Subtask::QueryToGold,
            source: "mind2web".into(),
            split: Some(Split::Ind),
        }
    }

    #[test]
    fn rank_arithmetic() {
        let mut r = RecallReport::new(&DEFAULT_KS);
        for rank in [Some(1), Some(4), Some(12)] {
            r.record(key(), rank.filter(|x| *x <= 10));
        }
        let row = &r.rows[&key()];
        assert!((row.recall(0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((row.recall(1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((row.recall(2) - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.is_monotone());
    }

    #[test]
    fn tsv_layouts() {
        let mut r = RecallReport::new(&DEFAULT_KS);
        r.record(key(), Some(3));
        r.record(key(), None);
        let overall = r.overall_tsv("reference");
        assert_eq!(
            overall,
            "method\tsplit\tmind2web R@1\tmind2web R@5\tmind2web R@10\nreference\tind\t0.0\t50.0\t50.0\n"
        );
        let sub = r.subtask_tsv(Some(Split::Ind));
        let row = sub.lines().nth(1).unwrap();
        assert!(row.starts_with("mind2web\t-\t-\t-\t-\t0.0/50.0/50.0\t-"));
    }
}

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{StateId, TrajectoryRecord};

/// Per-source state-count statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub tasks: usize,
    pub states_min: usize,
    pub states_max: usize,
    pub states_avg: f64,
    pub states_total: usize,
}

impl SourceStats {
    /// Summary built from the per-trajectory step counts.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let total: usize = lengths.iter().sum();
        Self {
            tasks: lengths.len(),
            states_min: lengths.iter().copied().min().unwrap_or(0),
            states_max: lengths.iter().copied().max().unwrap_or(0),
            states_avg: if lengths.is_empty() {
                0.0
            } else {
                total as f64 / lengths.len() as f64
            },
            states_total: total,
        }
    }
}

/// Corpus statistics keyed by source name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sources: BTreeMap<String, SourceStats>,
}

impl CorpusManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("source\ttasks\tmin\tmax\tavg\ttotal\n");
        for (name, s) in &self.sources {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}\t{:.2}\t{}",
                s.tasks, s.states_min, s.states_max, s.states_avg, s.states_total
            );
        }
        out
    }
}

pub fn corpus_stats(corpus: &[TrajectoryRecord]) -> CorpusManifest {
    let mut lengths: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for t in corpus {
        lengths.entry(t.source.clone()).or_default().push(t.len());
    }
    CorpusManifest {
        sources: lengths
            .into_iter()
            .map(|(k, v)| (k, SourceStats::from_lengths(&v)))
            .collect(),
    }
}

/// The deduplicated state candidate set.
///
/// States with identical screenshot bytes collapse onto one representative,
/// the smallest `(trajectory id, index)` among them. Every state of the corpus
/// resolves to exactly one member.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatePool {
    members: Vec<StateId>,
    representative: HashMap<StateId, StateId>,
}

impl StatePool {
    /// Sorted representatives.
    pub fn members(&self) -> &[StateId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The pool member standing in for `state`, if the state is known.
    pub fn resolve(&self, state: &StateId) -> Option<&StateId> {
        self.representative.get(state)
    }

    pub fn is_representative(&self, state: &StateId) -> bool {
        self.resolve(state) == Some(state)
    }
}

/// Groups states by content hash and keeps one representative per group.
///
/// States without a content hash (not ingested from disk) are treated as
/// distinct from everything else.
pub fn dedup_states(corpus: &[TrajectoryRecord]) -> StatePool {
    let mut groups: HashMap<&str, Vec<StateId>> = HashMap::new();
    let mut singletons = Vec::new();
    for t in corpus {
        for step in &t.steps {
            let id = StateId::new(&t.id, step.state.index);
            if step.state.content_hash.is_empty() {
                singletons.push(id);
            } else {
                groups.entry(&step.state.content_hash).or_default().push(id);
            }
        }
    }

    let mut representative = HashMap::new();
    let mut members = Vec::with_capacity(groups.len() + singletons.len());
    for ids in groups.into_values() {
        let rep = ids.iter().min().expect("groups are non-empty").clone();
        for id in ids {
            representative.insert(id, rep.clone());
        }
        members.push(rep);
    }
    for id in singletons {
        representative.insert(id.clone(), id.clone());
        members.push(id);
    }
    members.sort();
    StatePool {
        members,
        representative,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::mind2web_record;

    fn corpus(lens: &[u32]) -> Vec<TrajectoryRecord> {
        lens.iter()
            .enumerate()
            .map(|(k, &n)| {
                let mut t = mind2web_record(n);
                t.id = format!("t{k}");
                for s in &mut t.steps {
                    s.state.content_hash = format!("{k}-{}", s.state.index);
                }
                t
            })
            .collect()
    }

    #[test]
    fn distinct_screenshots_keep_every_state() {
        let c = corpus(&[3, 2, 1]);
        assert_eq!(dedup_states(&c).len(), 6);
    }

    #[test]
    fn shared_screenshot_collapses_to_smallest_id() {
        let mut c = corpus(&[2, 2]);
        c[1].steps[0].state.content_hash = c[0].steps[1].state.content_hash.clone();
        let pool = dedup_states(&c);
        assert_eq!(pool.len(), 3);
        let dup = StateId::new("t1", 1);
        assert_eq!(pool.resolve(&dup), Some(&StateId::new("t0", 2)));
        assert!(!pool.is_representative(&dup));
    }

    #[test]
    fn dedup_is_order_independent_and_idempotent() {
        let mut c = corpus(&[3, 4, 2]);
        c[2].steps[1].state.content_hash = "shared".into();
        c[0].steps[0].state.content_hash = "shared".into();
        let pool = dedup_states(&c);
        c.reverse();
        for t in &mut c {
            t.steps.reverse();
        }
        assert_eq!(dedup_states(&c).members(), pool.members());

        // Restricting the corpus to representatives changes nothing.
        let kept: Vec<TrajectoryRecord> = c
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.steps
                    .retain(|s| pool.is_representative(&StateId::new(&t.id, s.state.index)));
                t
            })
            .collect();
        assert_eq!(dedup_states(&kept).members(), pool.members());
    }

    #[test]
    fn stats_totals_match_sums() {
        let c = corpus(&[1, 2, 3]);
        let m = corpus_stats(&c);
        let s = &m.sources["mind2web"];
        assert_eq!((s.tasks, s.states_min, s.states_max, s.states_total), (3, 1, 3, 6));
        assert!((s.states_avg - 2.0).abs() < 1e-12);
        assert!(m.to_tsv().contains("mind2web\t3\t1\t3\t2.00\t6"));
    }

    #[test]
    fn mind2web_scale_average() {
        // 9,621 states over 1,468 tasks.
        let mut lengths = vec![6usize; 1468];
        let extra = 9621 - 6 * 1468;
        for l in lengths.iter_mut().take(extra) {
            *l += 1;
        }
        let s = SourceStats::from_lengths(&lengths);
        assert_eq!(s.states_total, 9621);
        assert_eq!(format!("{:.2}", s.states_avg), "6.55");
    }
}

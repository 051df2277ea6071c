//! Retrieval-pair extraction.
//!
//! Every trajectory yields positive (key, value) pairs for twelve subtasks
//! grouped into six tasks. Keys are an instruction-augmented query plus an
//! optional trajectory segment; values are a state, an interval or a whole
//! trajectory, each of which lives in the candidate pool of its kind.

mod counts;
mod extract;
mod pools;
mod split;
mod templates;

pub use counts::{expected_task_counts, CountTable, TaskCounts};
pub use extract::{extract_corpus, extract_pairs, ExtractError};
pub use pools::{apply_lite_cap, build_pools, CandidatePool, LiteCap, PoolError, PoolSet};
pub use split::{ood_trajectories, split_dataset, SplitConfig, SplitError};
pub use templates::{InstructionTemplateSet, TemplateError, TEMPLATES_PER_SUBTASK};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::trajectory::StateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// A single state `s_i` (`i == j`).
    State,
    /// A contiguous interval `τ_{i:j}`.
    Interval,
    /// The whole trajectory `τ_{1:n}`.
    Full,
}

/// Reference to a piece of one trajectory, with 1-based inclusive bounds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    pub trajectory_id: String,
    pub kind: SegmentKind,
    pub i: u32,
    pub j: u32,
}

impl SegmentRef {
    pub fn state(trajectory_id: &str, i: u32) -> Self {
        Self {
            trajectory_id: trajectory_id.to_string(),
            kind: SegmentKind::State,
            i,
            j: i,
        }
    }

    pub fn interval(trajectory_id: &str, i: u32, j: u32) -> Self {
        Self {
            trajectory_id: trajectory_id.to_string(),
            kind: SegmentKind::Interval,
            i,
            j,
        }
    }

    pub fn full(trajectory_id: &str, n: u32) -> Self {
        Self {
            trajectory_id: trajectory_id.to_string(),
            kind: SegmentKind::Full,
            i: 1,
            j: n,
        }
    }

    /// Number of steps covered.
    pub fn len(&self) -> u32 {
        self.j + 1 - self.i
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state_id(&self) -> Option<StateId> {
        (self.kind == SegmentKind::State).then(|| StateId::new(&self.trajectory_id, self.i))
    }

    /// Bounds check against a trajectory of `n` steps.
    pub fn is_valid_for(&self, n: u32) -> bool {
        let bounds = 1 <= self.i && self.i <= self.j && self.j <= n;
        bounds
            && match self.kind {
                SegmentKind::State => self.i == self.j,
                SegmentKind::Interval => true,
                SegmentKind::Full => self.i == 1 && self.j == n,
            }
    }

    /// Stable textual key, e.g. `traj-7|interval|2|5`.
    pub fn key(&self) -> String {
        let kind = match self.kind {
            SegmentKind::State => "state",
            SegmentKind::Interval => "interval",
            SegmentKind::Full => "full",
        };
        format!("{}|{kind}|{}|{}", self.trajectory_id, self.i, self.j)
    }
}

impl fmt::Display for SegmentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Which candidate pool a value is retrieved from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    State,
    Trajectory,
    Interval,
}

impl PoolKind {
    pub const ALL: [PoolKind; 3] = [PoolKind::State, PoolKind::Trajectory, PoolKind::Interval];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::State => "state",
            PoolKind::Trajectory => "trajectory",
            PoolKind::Interval => "interval",
        }
    }

    pub fn of_segment(kind: SegmentKind) -> Self {
        match kind {
            SegmentKind::State => PoolKind::State,
            SegmentKind::Interval => PoolKind::Interval,
            SegmentKind::Full => PoolKind::Trajectory,
        }
    }
}

/// The twelve retrieval subtasks, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    /// (q, τ_{1:i}) → τ_{i+1:n}
    PrefixToSuffix,
    /// (q, τ_{i+1:n}) → τ_{1:i}
    SuffixToPrefix,
    /// (q, τ_{1:i}) → s_{i+1}
    PrefixToNextState,
    /// (q, τ_{i+1:n}) → s_i
    SuffixToPrevState,
    /// q → τ (gold)
    QueryToGold,
    /// q → τ (silver)
    QueryToSilver,
    /// (q, s_i) → s_{i+1}
    StateToNextState,
    /// (q, s_{i+1}) → s_i
    StateToPrevState,
    /// (q, s_i) → τ_{i+1:n}
    StateToSuffix,
    /// (q, s_{i+1}) → τ_{1:i}
    StateToPrefix,
    /// q → s_i
    QueryToState,
    /// q → s_n
    QueryToTerminalState,
}

impl Subtask {
    pub const ALL: [Subtask; 12] = [
        Subtask::PrefixToSuffix,
        Subtask::SuffixToPrefix,
        Subtask::PrefixToNextState,
        Subtask::SuffixToPrevState,
        Subtask::QueryToGold,
        Subtask::QueryToSilver,
        Subtask::StateToNextState,
        Subtask::StateToPrevState,
        Subtask::StateToSuffix,
        Subtask::StateToPrefix,
        Subtask::QueryToState,
        Subtask::QueryToTerminalState,
    ];

    /// Task number 1..=6.
    pub fn task(self) -> u8 {
        (self as u8) / 2 + 1
    }

    pub fn code(self) -> &'static str {
        match self {
            Subtask::PrefixToSuffix => "prefix_to_suffix",
            Subtask::SuffixToPrefix => "suffix_to_prefix",
            Subtask::PrefixToNextState => "prefix_to_next_state",
            Subtask::SuffixToPrevState => "suffix_to_prev_state",
            Subtask::QueryToGold => "query_to_gold",
            Subtask::QueryToSilver => "query_to_silver",
            Subtask::StateToNextState => "state_to_next_state",
            Subtask::StateToPrevState => "state_to_prev_state",
            Subtask::StateToSuffix => "state_to_suffix",
            Subtask::StateToPrefix => "state_to_prefix",
            Subtask::QueryToState => "query_to_state",
            Subtask::QueryToTerminalState => "query_to_terminal_state",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    /// Human-readable notation used in report headers.
    pub fn notation(self) -> &'static str {
        match self {
            Subtask::PrefixToSuffix => "(q,τ_{1:i})→τ_{i+1:n}",
            Subtask::SuffixToPrefix => "(q,τ_{i+1:n})→τ_{1:i}",
            Subtask::PrefixToNextState => "(q,τ_{1:i})→s_{i+1}",
            Subtask::SuffixToPrevState => "(q,τ_{i+1:n})→s_i",
            Subtask::QueryToGold => "q→τ_≡",
            Subtask::QueryToSilver => "q→τ_∼",
            Subtask::StateToNextState => "(q,s_i)→s_{i+1}",
            Subtask::StateToPrevState => "(q,s_{i+1})→s_i",
            Subtask::StateToSuffix => "(q,s_i)→τ_{i+1:n}",
            Subtask::StateToPrefix => "(q,s_{i+1})→τ_{1:i}",
            Subtask::QueryToState => "q→s_i",
            Subtask::QueryToTerminalState => "q→s_n",
        }
    }

    /// Task-level notation, shared by both subtasks of a task.
    pub fn task_notation(task: u8) -> &'static str {
        match task {
            1 => "(q,τ)→τ'",
            2 => "(q,τ)→s",
            3 => "q→τ",
            4 => "(q,s)→s'",
            5 => "(q,s)→τ",
            6 => "q→s",
            _ => "?",
        }
    }

    /// Kind of the key's segment, `None` for text-only keys.
    pub fn key_kind(self) -> Option<SegmentKind> {
        use Subtask::*;
        match self {
            PrefixToSuffix | SuffixToPrefix | PrefixToNextState | SuffixToPrevState => {
                Some(SegmentKind::Interval)
            }
            StateToNextState | StateToPrevState | StateToSuffix | StateToPrefix => {
                Some(SegmentKind::State)
            }
            QueryToGold | QueryToSilver | QueryToState | QueryToTerminalState => None,
        }
    }

    pub fn value_kind(self) -> SegmentKind {
        use Subtask::*;
        match self {
            PrefixToSuffix | SuffixToPrefix | StateToSuffix | StateToPrefix => SegmentKind::Interval,
            QueryToGold | QueryToSilver => SegmentKind::Full,
            _ => SegmentKind::State,
        }
    }

    pub fn value_pool(self) -> PoolKind {
        PoolKind::of_segment(self.value_kind())
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Ind,
    Ood,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Ind => "ind",
            Split::Ood => "ood",
        }
    }
}

/// One labelled positive pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalPair {
    pub subtask: Subtask,
    /// Instruction template instantiated with the relevant description.
    pub key_query: String,
    pub key_segment: Option<SegmentRef>,
    pub value_segment: SegmentRef,
    /// `None` until the dataset has been split.
    pub split: Option<Split>,
}

impl RetrievalPair {
    pub fn trajectory_id(&self) -> &str {
        &self.value_segment.trajectory_id
    }

    /// Checks that the key/value kinds agree with the subtask.
    pub fn shape_is_consistent(&self) -> bool {
        self.key_segment.as_ref().map(|s| s.kind) == self.subtask.key_kind()
            && self.value_segment.kind == self.subtask.value_kind()
            && self
                .key_segment
                .as_ref()
                .is_none_or(|k| k.trajectory_id == self.value_segment.trajectory_id)
    }
}

/// Five intent-preserving rewrites of a trajectory's query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SilverSet {
    pub trajectory_id: String,
    pub gold_query: String,
    pub rewrites: Vec<String>,
}

pub const SILVER_REWRITES: usize = 5;

impl SilverSet {
    /// Problems with the set: wrong count, duplicates, or a rewrite equal to
    /// the gold query.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rewrites.len() != SILVER_REWRITES {
            out.push(format!(
                "expected {SILVER_REWRITES} rewrites, found {}",
                self.rewrites.len()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.rewrites {
            if r.trim().is_empty() {
                out.push("empty rewrite".to_string());
            }
            if r == &self.gold_query {
                out.push(format!("rewrite equals the gold query: {r}"));
            }
            if !seen.insert(r.as_str()) {
                out.push(format!("duplicate rewrite: {r}"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subtask_tasks_and_codes() {
        let tasks: Vec<u8> = Subtask::ALL.iter().map(|s| s.task()).collect();
        assert_eq!(tasks, [1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6]);
        for s in Subtask::ALL {
            assert_eq!(Subtask::from_code(s.code()), Some(s));
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.code()));
        }
    }

    #[test]
    fn value_pools_follow_the_table() {
        use Subtask::*;
        assert_eq!(StateToNextState.value_pool(), PoolKind::State);
        assert_eq!(StateToSuffix.value_pool(), PoolKind::Interval);
        assert_eq!(QueryToSilver.value_pool(), PoolKind::Trajectory);
        assert_eq!(PrefixToNextState.key_kind(), Some(SegmentKind::Interval));
        assert_eq!(QueryToState.key_kind(), None);
    }

    #[test]
    fn segment_bounds() {
        assert!(SegmentRef::state("t", 2).is_valid_for(2));
        assert!(!SegmentRef::state("t", 3).is_valid_for(2));
        assert!(SegmentRef::interval("t", 2, 3).is_valid_for(3));
        assert!(!SegmentRef::interval("t", 3, 2).is_valid_for(3));
        assert!(!SegmentRef::full("t", 3).is_valid_for(4));
        assert_eq!(SegmentRef::interval("t", 2, 5).len(), 4);
    }

    #[test]
    fn silver_set_invariants() {
        let mut s = SilverSet {
            trajectory_id: "t".into(),
            gold_query: "g".into(),
            rewrites: (0..5).map(|k| format!("r{k}")).collect(),
        };
        assert!(s.violations().is_empty());
        s.rewrites[4] = "g".into();
        assert_eq!(s.violations().len(), 1);
        s.rewrites[4] = "r0".into();
        assert_eq!(s.violations().len(), 1);
        s.rewrites.pop();
        assert!(!s.violations().is_empty());
    }
}

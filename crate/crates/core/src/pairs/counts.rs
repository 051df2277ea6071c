use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{RetrievalPair, Subtask, SILVER_REWRITES};

/// Pair counts per subtask, indexed in table order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub per_subtask: [u64; 12],
}

impl TaskCounts {
    pub fn subtask(&self, s: Subtask) -> u64 {
        self.per_subtask[s as usize]
    }

    pub fn add(&mut self, s: Subtask, n: u64) {
        self.per_subtask[s as usize] += n;
    }

    /// Sum of the two subtasks of task `task` (1..=6).
    pub fn task(&self, task: u8) -> u64 {
        Subtask::ALL
            .iter()
            .filter(|s| s.task() == task)
            .map(|s| self.subtask(*s))
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.per_subtask.iter().sum()
    }

    pub fn merge(&mut self, other: &TaskCounts) {
        for (a, b) in self.per_subtask.iter_mut().zip(other.per_subtask) {
            *a += b;
        }
    }
}

/// Closed-form pair counts for a corpus of `tasks` trajectories holding
/// `states` states, of which `unique_states` survive deduplication.
pub fn expected_task_counts(tasks: u64, states: u64, unique_states: u64) -> TaskCounts {
    let split_points = states.saturating_sub(tasks);
    let mut c = TaskCounts::default();
    for s in Subtask::ALL {
        let n = match s {
            Subtask::QueryToGold => tasks,
            Subtask::QueryToSilver => SILVER_REWRITES as u64 * tasks,
            Subtask::QueryToState => unique_states,
            Subtask::QueryToTerminalState => tasks,
            _ => split_points,
        };
        c.add(s, n);
    }
    c
}

/// Pair counts per source, rendered as tasks-by-source tables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub sources: BTreeMap<String, TaskCounts>,
}

impl CountTable {
    /// Tallies `pairs`, attributing each to the source of its trajectory.
    /// Pairs of unknown trajectories are counted under `"unknown"`.
    pub fn from_pairs(pairs: &[RetrievalPair], source_of: &HashMap<String, String>) -> Self {
        let mut sources: BTreeMap<String, TaskCounts> = BTreeMap::new();
        for p in pairs {
            let source = source_of
                .get(p.trajectory_id())
                .map(String::as_str)
                .unwrap_or("unknown");
            sources.entry(source.to_string()).or_default().add(p.subtask, 1);
        }
        Self { sources }
    }

    pub fn total(&self) -> TaskCounts {
        let mut t = TaskCounts::default();
        for c in self.sources.values() {
            t.merge(c);
        }
        t
    }

    fn header(&self, first: &str) -> String {
        let mut out = String::from(first);
        for name in self.sources.keys() {
            out.push('\t');
            out.push_str(name);
        }
        out.push_str("\ttotal\n");
        out
    }

    /// One row per task: notation, then one column per source, then total.
    pub fn to_task_tsv(&self) -> String {
        let mut out = self.header("task");
        let total = self.total();
        for task in 1..=6u8 {
            out.push_str(Subtask::task_notation(task));
            for c in self.sources.values() {
                let _ = write!(out, "\t{}", c.task(task));
            }
            let _ = writeln!(out, "\t{}", total.task(task));
        }
        out
    }

    /// One row per subtask, with the subtask code and notation.
    pub fn to_subtask_tsv(&self) -> String {
        let mut out = self.header("subtask\tnotation");
        let total = self.total();
        for s in Subtask::ALL {
            let _ = write!(out, "{}\t{}", s.code(), s.notation());
            for c in self.sources.values() {
                let _ = write!(out, "\t{}", c.subtask(s));
            }
            let _ = writeln!(out, "\t{}", total.subtask(s));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_for_three_step_trajectory() {
        let c = expected_task_counts(1, 3, 3);
        assert_eq!([1, 2, 3, 4, 5, 6].map(|t| c.task(t)), [4, 4, 6, 4, 4, 4]);
        assert_eq!(c.total(), 26);
    }

    #[test]
    fn single_state_trajectory() {
        let c = expected_task_counts(1, 1, 1);
        assert_eq!(c.task(1), 0);
        assert_eq!(c.task(6), 2);
        assert_eq!(c.total(), 8);
    }

    #[test]
    fn tsv_layout() {
        let mut t = CountTable::default();
        t.sources.insert("a".into(), expected_task_counts(1, 3, 3));
        t.sources.insert("b".into(), expected_task_counts(2, 2, 2));
        let tsv = t.to_task_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "task\ta\tb\ttotal");
        assert_eq!(lines[3], "q→τ\t6\t12\t18");
        assert_eq!(lines.len(), 7);
        let sub = t.to_subtask_tsv();
        assert!(sub.contains("query_to_silver\tq→τ_∼\t5\t10\t15"));
    }
}

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PoolKind, RetrievalPair, SegmentKind, SegmentRef};
use crate::trajectory::{StatePool, TrajectoryRecord};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("{kind} pool: duplicate member {member}")]
    DuplicateMember { kind: &'static str, member: SegmentRef },
    #[error("{kind} pool: member {member} has the wrong segment kind")]
    WrongKind { kind: &'static str, member: SegmentRef },
    #[error("pair {pair}: value {value} is not in the {kind} pool")]
    MissingValue {
        pair: usize,
        value: SegmentRef,
        kind: &'static str,
    },
    #[error("pools file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Length limits of the lite benchmark variant.
///
/// Intervals are kept when they span at most `interval_cap` steps; whole
/// trajectories are kept when they have fewer than `trajectory_cap` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiteCap {
    pub interval_cap: u32,
    pub trajectory_cap: u32,
}

impl Default for LiteCap {
    fn default() -> Self {
        Self {
            interval_cap: 10,
            trajectory_cap: 10,
        }
    }
}

impl LiteCap {
    pub fn keeps(&self, seg: &SegmentRef) -> bool {
        match seg.kind {
            SegmentKind::State => true,
            SegmentKind::Interval => seg.len() <= self.interval_cap,
            SegmentKind::Full => seg.len() < self.trajectory_cap,
        }
    }
}

/// One candidate set. Members are unique and sorted; a state pool may also
/// carry aliases mapping duplicate states onto their representative member.
#[derive(Debug, Clone, Default)]
pub struct CandidatePool {
    kind: Option<PoolKind>,
    members: Vec<SegmentRef>,
    index: HashMap<SegmentRef, usize>,
    aliases: HashMap<SegmentRef, usize>,
}

impl CandidatePool {
    pub fn from_members(kind: PoolKind, mut members: Vec<SegmentRef>) -> Result<Self, PoolError> {
        members.sort();
        let mut index = HashMap::with_capacity(members.len());
        for (row, m) in members.iter().enumerate() {
            if PoolKind::of_segment(m.kind) != kind {
                return Err(PoolError::WrongKind {
                    kind: kind.name(),
                    member: m.clone(),
                });
            }
            if index.insert(m.clone(), row).is_some() {
                return Err(PoolError::DuplicateMember {
                    kind: kind.name(),
                    member: m.clone(),
                });
            }
        }
        Ok(Self {
            kind: Some(kind),
            members,
            index,
            aliases: HashMap::new(),
        })
    }

    /// State pool from corpus-level deduplication, with every duplicate state
    /// aliased to its representative.
    pub fn from_state_pool(states: &StatePool, corpus: &[TrajectoryRecord]) -> Self {
        let members = states
            .members()
            .iter()
            .map(|s| SegmentRef::state(&s.trajectory_id, s.index))
            .collect();
        let mut pool = Self::from_members(PoolKind::State, members)
            .expect("state pool members are unique states");
        for t in corpus {
            for step in &t.steps {
                let id = crate::trajectory::StateId::new(&t.id, step.state.index);
                if let Some(rep) = states.resolve(&id) {
                    if rep != &id {
                        let row = pool.index[&SegmentRef::state(&rep.trajectory_id, rep.index)];
                        pool.aliases.insert(SegmentRef::state(&t.id, step.state.index), row);
                    }
                }
            }
        }
        pool
    }

    pub fn kind(&self) -> Option<PoolKind> {
        self.kind
    }

    pub fn members(&self) -> &[SegmentRef] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Row of the member that `seg` refers to, following aliases.
    pub fn resolve(&self, seg: &SegmentRef) -> Option<usize> {
        self.index
            .get(seg)
            .or_else(|| self.aliases.get(seg))
            .copied()
    }

    pub fn contains(&self, seg: &SegmentRef) -> bool {
        self.resolve(seg).is_some()
    }

    /// The sub-pool holding only the members that `values` resolve to.
    /// Unresolvable values are ignored.
    pub fn restrict_to<'a>(&self, values: impl IntoIterator<Item = &'a SegmentRef>) -> Self {
        let mut keep = vec![false; self.members.len()];
        for v in values {
            if let Some(row) = self.resolve(v) {
                keep[row] = true;
            }
        }
        let members: Vec<SegmentRef> = self
            .members
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(m, _)| m.clone())
            .collect();
        let kind = self.kind.unwrap_or(PoolKind::State);
        let mut out = Self::from_members(kind, members).expect("subset of a valid pool");
        for (alias, row) in &self.aliases {
            if let Some(new_row) = out.index.get(&self.members[*row]).copied() {
                out.aliases.insert(alias.clone(), new_row);
            }
        }
        out
    }

    fn aliases_by_member(&self) -> BTreeMap<usize, Vec<SegmentRef>> {
        let mut out: BTreeMap<usize, Vec<SegmentRef>> = BTreeMap::new();
        for (alias, row) in &self.aliases {
            out.entry(*row).or_default().push(alias.clone());
        }
        for v in out.values_mut() {
            v.sort();
        }
        out
    }
}

/// The state, trajectory and interval pools of a corpus.
#[derive(Debug, Clone, Default)]
pub struct PoolSet {
    pub state: CandidatePool,
    pub trajectory: CandidatePool,
    pub interval: CandidatePool,
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    pool_kind: PoolKind,
    member: SegmentRef,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    aliases: Vec<SegmentRef>,
}

impl PoolSet {
    pub fn get(&self, kind: PoolKind) -> &CandidatePool {
        match kind {
            PoolKind::State => &self.state,
            PoolKind::Trajectory => &self.trajectory,
            PoolKind::Interval => &self.interval,
        }
    }

    /// Every pair's value must resolve in the pool its subtask targets.
    pub fn check_integrity(&self, pairs: &[RetrievalPair]) -> Result<(), PoolError> {
        for (n, p) in pairs.iter().enumerate() {
            let kind = p.subtask.value_pool();
            if !self.get(kind).contains(&p.value_segment) {
                return Err(PoolError::MissingValue {
                    pair: n,
                    value: p.value_segment.clone(),
                    kind: kind.name(),
                });
            }
        }
        Ok(())
    }

    /// Restricts each pool to the values referenced by `pairs`.
    pub fn mini(&self, pairs: &[RetrievalPair]) -> Self {
        let values = |kind: PoolKind| {
            pairs
                .iter()
                .filter(move |p| p.subtask.value_pool() == kind)
                .map(|p| &p.value_segment)
        };
        Self {
            state: self.state.restrict_to(values(PoolKind::State)),
            trajectory: self.trajectory.restrict_to(values(PoolKind::Trajectory)),
            interval: self.interval.restrict_to(values(PoolKind::Interval)),
        }
    }

    /// One JSON object per member, pools in state / trajectory / interval order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), PoolError> {
        for kind in PoolKind::ALL {
            let pool = self.get(kind);
            let mut aliases = pool.aliases_by_member();
            for (row, member) in pool.members.iter().enumerate() {
                let line = PoolLine {
                    pool_kind: kind,
                    member: member.clone(),
                    aliases: aliases.remove(&row).unwrap_or_default(),
                };
                writeln!(w, "{}", serde_json::to_string(&line).expect("pool lines serialize"))?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, PoolError> {
        let mut members: BTreeMap<PoolKind, Vec<(SegmentRef, Vec<SegmentRef>)>> = BTreeMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PoolLine = serde_json::from_str(&line).map_err(|e| PoolError::Format {
                line: n + 1,
                message: e.to_string(),
            })?;
            members
                .entry(parsed.pool_kind)
                .or_default()
                .push((parsed.member, parsed.aliases));
        }
        let mut build = |kind: PoolKind| -> Result<CandidatePool, PoolError> {
            let entries = members.remove(&kind).unwrap_or_default();
            let mut pool = CandidatePool::from_members(
                kind,
                entries.iter().map(|(m, _)| m.clone()).collect(),
            )?;
            for (m, aliases) in entries {
                let row = pool.index[&m];
                for a in aliases {
                    pool.aliases.insert(a, row);
                }
            }
            Ok(pool)
        };
        Ok(Self {
            state: build(PoolKind::State)?,
            trajectory: build(PoolKind::Trajectory)?,
            interval: build(PoolKind::Interval)?,
        })
    }
}

/// Builds the three candidate pools. With a lite cap, long trajectories and
/// long intervals are left out; the state pool is never capped.
pub fn build_pools(
    corpus: &[TrajectoryRecord],
    states: &StatePool,
    cap: Option<&LiteCap>,
) -> PoolSet {
    let keeps = |seg: &SegmentRef| cap.is_none_or(|c| c.keeps(seg));
    let mut trajectories = Vec::with_capacity(corpus.len());
    let mut intervals = Vec::new();
    for t in corpus {
        let n = t.len() as u32;
        if n == 0 {
            continue;
        }
        let full = SegmentRef::full(&t.id, n);
        if keeps(&full) {
            trajectories.push(full);
        }
        for i in 1..=n {
            for j in i..=n {
                let seg = SegmentRef::interval(&t.id, i, j);
                if keeps(&seg) {
                    intervals.push(seg);
                }
            }
        }
    }
    PoolSet {
        state: CandidatePool::from_state_pool(states, corpus),
        trajectory: CandidatePool::from_members(PoolKind::Trajectory, trajectories)
            .expect("trajectory ids are unique"),
        interval: CandidatePool::from_members(PoolKind::Interval, intervals)
            .expect("intervals are unique"),
    }
}

/// Drops pairs whose key or value segment exceeds the lite limits. Pairs made
/// only of states are always kept.
pub fn apply_lite_cap(pairs: Vec<RetrievalPair>, cap: &LiteCap) -> Vec<RetrievalPair> {
    pairs
        .into_iter()
        .filter(|p| cap.keeps(&p.value_segment) && p.key_segment.as_ref().is_none_or(|k| cap.keeps(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::{extract_pairs, InstructionTemplateSet, SilverSet, Subtask};
    use crate::trajectory::tests::mind2web_record;
    use crate::trajectory::dedup_states;

    fn corpus(lens: &[u32]) -> Vec<TrajectoryRecord> {
        lens.iter()
            .enumerate()
            .map(|(k, &n)| {
                let mut t = mind2web_record(n);
                t.id = format!("t{k:02}");
                for s in &mut t.steps {
                    s.state.content_hash = format!("{k}/{}", s.state.index);
                }
                t
            })
            .collect()
    }

    fn all_pairs(c: &[TrajectoryRecord], states: &StatePool) -> Vec<RetrievalPair> {
        let templates = InstructionTemplateSet::builtin();
        c.iter()
            .flat_map(|t| {
                let silver = SilverSet {
                    trajectory_id: t.id.clone(),
                    gold_query: t.query.clone(),
                    rewrites: (0..5).map(|k| format!("alt {k}")).collect(),
                };
                extract_pairs(t, Some(&silver), &templates, 1, Some(states)).unwrap()
            })
            .collect()
    }

    #[test]
    fn interval_pool_enumerates_all_contiguous_segments() {
        let c = corpus(&[3]);
        let pools = build_pools(&c, &dedup_states(&c), None);
        let got: Vec<(u32, u32)> = pools.interval.members().iter().map(|s| (s.i, s.j)).collect();
        assert_eq!(got, [(1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]);
    }

    #[test]
    fn lite_interval_count_for_long_trajectory() {
        let c = corpus(&[12, 10, 9]);
        let pools = build_pools(&c, &dedup_states(&c), Some(&LiteCap::default()));
        // 10*12-45 + 10*11/2 + 9*10/2
        assert_eq!(pools.interval.len(), 75 + 55 + 45);
        // Only the 9-step trajectory has fewer than 10 steps.
        assert_eq!(pools.trajectory.len(), 1);
    }

    #[test]
    fn every_value_is_in_its_pool() {
        let mut c = corpus(&[4, 2, 1, 5]);
        c[3].steps[2].state.content_hash = c[0].steps[1].state.content_hash.clone();
        let states = dedup_states(&c);
        let pairs = all_pairs(&c, &states);
        let pools = build_pools(&c, &states, None);
        pools.check_integrity(&pairs).unwrap();
        assert_eq!(pools.state.len(), 11);
        // The duplicate resolves onto the earlier representative.
        let dup = SegmentRef::state("t03", 3);
        assert_eq!(
            pools.state.members()[pools.state.resolve(&dup).unwrap()],
            SegmentRef::state("t00", 2)
        );
    }

    #[test]
    fn lite_cap_keeps_state_pairs_and_respects_pools() {
        let c = corpus(&[12, 10, 3]);
        let states = dedup_states(&c);
        let pairs = all_pairs(&c, &states);
        let count = |ps: &[RetrievalPair], s: Subtask| ps.iter().filter(|p| p.subtask == s).count();
        let cap = LiteCap::default();
        let lite = apply_lite_cap(pairs.clone(), &cap);
        assert_eq!(
            count(&pairs, Subtask::StateToNextState),
            count(&lite, Subtask::StateToNextState)
        );
        assert!(lite.iter().all(|p| p.value_segment.len() <= 10));
        assert!(!lite
            .iter()
            .any(|p| p.subtask == Subtask::QueryToGold && p.trajectory_id() != "t02"));
        build_pools(&c, &states, Some(&cap)).check_integrity(&lite).unwrap();
    }

    #[test]
    fn lite_cap_is_identity_on_short_corpora() {
        let c = corpus(&[9, 5, 1]);
        let states = dedup_states(&c);
        let pairs = all_pairs(&c, &states);
        assert_eq!(apply_lite_cap(pairs.clone(), &LiteCap::default()), pairs);
    }

    #[test]
    fn jsonl_round_trip_keeps_aliases() {
        let mut c = corpus(&[3, 2]);
        c[1].steps[1].state.content_hash = c[0].steps[0].state.content_hash.clone();
        let states = dedup_states(&c);
        let pools = build_pools(&c, &states, None);
        let mut buf = Vec::new();
        pools.write_jsonl(&mut buf).unwrap();
        let back = PoolSet::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.state.members(), pools.state.members());
        assert_eq!(back.interval.members(), pools.interval.members());
        assert_eq!(back.state.resolve(&SegmentRef::state("t01", 2)), Some(0));
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn mini_pools_hold_only_referenced_values() {
        let c = corpus(&[3, 4]);
        let states = dedup_states(&c);
        let pairs: Vec<_> = all_pairs(&c, &states)
            .into_iter()
            .filter(|p| p.trajectory_id() == "t01")
            .collect();
        let mini = build_pools(&c, &states, None).mini(&pairs);
        assert_eq!(mini.trajectory.len(), 1);
        assert!(mini.state.members().iter().all(|m| m.trajectory_id == "t01"));
        mini.check_integrity(&pairs).unwrap();
    }

    #[test]
    fn wrong_kinds_and_duplicates_rejected() {
        assert!(matches!(
            CandidatePool::from_members(PoolKind::State, vec![SegmentRef::full("t", 2)]),
            Err(PoolError::WrongKind { .. })
        ));
        assert!(matches!(
            CandidatePool::from_members(
                PoolKind::State,
                vec![SegmentRef::state("t", 1), SegmentRef::state("t", 1)]
            ),
            Err(PoolError::DuplicateMember { .. })
        ));
    }
}

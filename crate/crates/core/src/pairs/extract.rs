use std::collections::{HashMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::{InstructionTemplateSet, RetrievalPair, SegmentRef, SilverSet, Subtask};
use crate::seed::rng_for;
use crate::trajectory::{StateId, StatePool, TrajectoryRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("trajectory {0}: no silver rewrites available")]
    MissingSilver(String),
    #[error("trajectory {id}: invalid silver set: {reason}")]
    InvalidSilver { id: String, reason: String },
    #[error("trajectory {0} has no steps")]
    Empty(String),
}

struct Emitter<'a> {
    trajectory: &'a TrajectoryRecord,
    templates: &'a InstructionTemplateSet,
    rng: rand_chacha::ChaCha8Rng,
    out: Vec<RetrievalPair>,
}

impl Emitter<'_> {
    fn emit(
        &mut self,
        subtask: Subtask,
        description: &str,
        key: Option<SegmentRef>,
        value: SegmentRef,
    ) {
        let n = self.templates.templates(subtask).len();
        let pick = self.rng.gen_range(0..n);
        self.out.push(RetrievalPair {
            subtask,
            key_query: self.templates.instantiate(subtask, pick, description),
            key_segment: key,
            value_segment: value,
            split: None,
        });
    }
}

/// Derives every positive pair of one trajectory.
///
/// For `n` steps, each of tasks 1, 2, 4 and 5 yields `2(n-1)` pairs (one per
/// split point and direction), task 3 yields one gold pair plus one pair per
/// silver rewrite, and task 6 yields one pair per unique state plus the
/// terminal-state pair.
///
/// A state counts as unique when it is its own representative in `states`
/// (corpus-level deduplication). Without a pool, uniqueness is decided by
/// screenshot hash within the trajectory.
///
/// Template choice is drawn from a stream keyed by `(seed, trajectory id)`, so
/// output does not depend on which other trajectories are processed.
pub fn extract_pairs(
    t: &TrajectoryRecord,
    silver: Option<&SilverSet>,
    templates: &InstructionTemplateSet,
    seed: u64,
    states: Option<&StatePool>,
) -> Result<Vec<RetrievalPair>, ExtractError> {
    if t.steps.is_empty() {
        return Err(ExtractError::Empty(t.id.clone()));
    }
    let silver = silver.ok_or_else(|| ExtractError::MissingSilver(t.id.clone()))?;
    let problems = silver.violations();
    if !problems.is_empty() {
        return Err(ExtractError::InvalidSilver {
            id: t.id.clone(),
            reason: problems.join("; "),
        });
    }

    let id = t.id.as_str();
    let n = t.len() as u32;
    let q = t.query.as_str();
    let mut e = Emitter {
        trajectory: t,
        templates,
        rng: rng_for(seed, id),
        out: Vec::with_capacity(8 * n as usize + 8),
    };

    let prefix = |i: u32| SegmentRef::interval(id, 1, i);
    let suffix = |i: u32| SegmentRef::interval(id, i + 1, n);
    let state = |i: u32| SegmentRef::state(id, i);

    // Split points i in [1, n-1].
    for i in 1..n {
        e.emit(Subtask::PrefixToSuffix, q, Some(prefix(i)), suffix(i));
    }
    for i in 1..n {
        e.emit(Subtask::SuffixToPrefix, q, Some(suffix(i)), prefix(i));
    }
    for i in 1..n {
        e.emit(Subtask::PrefixToNextState, q, Some(prefix(i)), state(i + 1));
    }
    for i in 1..n {
        e.emit(Subtask::SuffixToPrevState, q, Some(suffix(i)), state(i));
    }

    e.emit(Subtask::QueryToGold, q, None, SegmentRef::full(id, n));
    for rewrite in &silver.rewrites {
        e.emit(Subtask::QueryToSilver, rewrite, None, SegmentRef::full(id, n));
    }

    for i in 1..n {
        e.emit(Subtask::StateToNextState, q, Some(state(i)), state(i + 1));
    }
    for i in 1..n {
        e.emit(Subtask::StateToPrevState, q, Some(state(i + 1)), state(i));
    }
    for i in 1..n {
        e.emit(Subtask::StateToSuffix, q, Some(state(i)), suffix(i));
    }
    for i in 1..n {
        e.emit(Subtask::StateToPrefix, q, Some(state(i + 1)), prefix(i));
    }

    let mut seen_hashes = HashSet::new();
    for step in &e.trajectory.steps {
        let s = &step.state;
        let unique = match states {
            Some(pool) => pool.is_representative(&StateId::new(id, s.index)),
            None => s.content_hash.is_empty() || seen_hashes.insert(s.content_hash.as_str()),
        };
        if unique {
            e.emit(Subtask::QueryToState, &s.description, None, state(s.index));
        }
    }
    e.emit(Subtask::QueryToTerminalState, q, None, state(n));

    Ok(e.out)
}

/// Extracts pairs for a whole corpus, in corpus order. Trajectories are
/// processed in parallel; the result is independent of scheduling.
pub fn extract_corpus(
    corpus: &[TrajectoryRecord],
    silver: &HashMap<String, SilverSet>,
    templates: &InstructionTemplateSet,
    seed: u64,
    states: Option<&StatePool>,
) -> Result<Vec<RetrievalPair>, ExtractError> {
    let per_trajectory: Vec<Vec<RetrievalPair>> = corpus
        .par_iter()
        .map(|t| extract_pairs(t, silver.get(&t.id), templates, seed, states))
        .collect::<Result<_, _>>()?;
    Ok(per_trajectory.into_iter().flatten().collect())
}

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RetrievalPair, Split, Subtask};
use crate::seed::rng_for;
use crate::trajectory::TrajectoryRecord;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("splitting needs at least 2 trajectories, corpus has {0}")]
    TooFewTrajectories(usize),
    #[error("{name} must lie in (0, 1), got {value}")]
    Fraction { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Share of trajectories held out as out-of-domain.
    pub ood_fraction: f64,
    /// Share of the remaining pairs assigned to training.
    pub train_fraction: f64,
    pub seed: u64,
    /// Exact per-subtask train counts instead of independent draws.
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ood_fraction: 0.05,
            train_fraction: 0.9,
            seed: 0,
            stratified: false,
        }
    }
}

impl SplitConfig {
    fn check(&self) -> Result<(), SplitError> {
        for (name, value) in [
            ("ood_fraction", self.ood_fraction),
            ("train_fraction", self.train_fraction),
        ] {
            if !(value > 0.0 && value < 1.0) {
                return Err(SplitError::Fraction { name, value });
            }
        }
        Ok(())
    }
}

/// Ids of the trajectories held out as out-of-domain: `round(f * T)` of them,
/// at least one and never all.
pub fn ood_trajectories(
    corpus: &[TrajectoryRecord],
    config: &SplitConfig,
) -> Result<HashSet<String>, SplitError> {
    config.check()?;
    let t = corpus.len();
    if t < 2 {
        return Err(SplitError::TooFewTrajectories(t));
    }
    let mut ids: Vec<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut rng_for(config.seed, "split/ood"));
    let k = ((config.ood_fraction * t as f64).round() as usize).clamp(1, t - 1);
    Ok(ids[..k].iter().map(|s| s.to_string()).collect())
}

/// Labels every pair. Pairs of held-out trajectories become OOD; the rest are
/// divided between train and IND.
pub fn split_dataset(
    mut pairs: Vec<RetrievalPair>,
    corpus: &[TrajectoryRecord],
    config: &SplitConfig,
) -> Result<Vec<RetrievalPair>, SplitError> {
    let ood = ood_trajectories(corpus, config)?;
    let mut remaining: BTreeMap<Subtask, Vec<usize>> = BTreeMap::new();
    for (n, p) in pairs.iter_mut().enumerate() {
        if ood.contains(p.trajectory_id()) {
            p.split = Some(Split::Ood);
        } else {
            remaining.entry(p.subtask).or_default().push(n);
        }
    }

    if config.stratified {
        for (subtask, mut rows) in remaining {
            let mut rng = rng_for(config.seed, &format!("split/train/{}", subtask.code()));
            rows.shuffle(&mut rng);
            let k = (config.train_fraction * rows.len() as f64).round() as usize;
            for (pos, row) in rows.into_iter().enumerate() {
                pairs[row].split = Some(if pos < k { Split::Train } else { Split::Ind });
            }
        }
    } else {
        let mut rows: Vec<usize> = remaining.into_values().flatten().collect();
        rows.sort_unstable();
        let mut rng = rng_for(config.seed, "split/train");
        for row in rows {
            let train = rng.gen_bool(config.train_fraction);
            pairs[row].split = Some(if train { Split::Train } else { Split::Ind });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::SegmentRef;
    use crate::trajectory::tests::mind2web_record;

    fn corpus(t: usize) -> Vec<TrajectoryRecord> {
        (0..t)
            .map(|k| {
                let mut r = mind2web_record(2);
                r.id = format!("t{k:02}");
                r
            })
            .collect()
    }

    fn pairs_for(corpus: &[TrajectoryRecord], per: usize) -> Vec<RetrievalPair> {
        corpus
            .iter()
            .flat_map(|t| {
                (0..per).map(move |_| RetrievalPair {
                    subtask: Subtask::StateToNextState,
                    key_query: "q".into(),
                    key_segment: Some(SegmentRef::state(&t.id, 1)),
                    value_segment: SegmentRef::state(&t.id, 2),
                    split: None,
                })
            })
            .collect()
    }

    #[test]
    fn ood_is_whole_trajectory() {
        let c = corpus(20);
        let cfg = SplitConfig {
            ood_fraction: 0.1,
            seed: 5,
            ..Default::default()
        };
        let out = split_dataset(pairs_for(&c, 7), &c, &cfg).unwrap();
        let ood: HashSet<&str> = out
            .iter()
            .filter(|p| p.split == Some(Split::Ood))
            .map(|p| p.trajectory_id())
            .collect();
        assert_eq!(ood.len(), 2);
        assert!(out
            .iter()
            .filter(|p| p.split != Some(Split::Ood))
            .all(|p| !ood.contains(p.trajectory_id())));
        assert!(out.iter().all(|p| p.split.is_some()));
    }

    #[test]
    fn stratified_train_count_is_exact() {
        let c = corpus(101);
        let cfg = SplitConfig {
            ood_fraction: 0.01,
            train_fraction: 0.9,
            seed: 1,
            stratified: true,
        };
        let out = split_dataset(pairs_for(&c, 10), &c, &cfg).unwrap();
        let train = out.iter().filter(|p| p.split == Some(Split::Train)).count();
        let ind = out.iter().filter(|p| p.split == Some(Split::Ind)).count();
        assert_eq!((train, ind), (900, 100));
    }

    #[test]
    fn iid_train_count_within_binomial_noise() {
        let c = corpus(101);
        let cfg = SplitConfig {
            ood_fraction: 0.01,
            train_fraction: 0.9,
            seed: 2,
            stratified: false,
        };
        let out = split_dataset(pairs_for(&c, 10), &c, &cfg).unwrap();
        let train = out.iter().filter(|p| p.split == Some(Split::Train)).count() as f64;
        // sigma = sqrt(1000 * 0.9 * 0.1) ~ 9.5
        assert!((train - 900.0).abs() < 4.0 * 9.5, "{train}");
    }

    #[test]
    fn deterministic_given_seed() {
        let c = corpus(30);
        let cfg = SplitConfig::default();
        let a = split_dataset(pairs_for(&c, 3), &c, &cfg).unwrap();
        let b = split_dataset(pairs_for(&c, 3), &c, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let c = corpus(1);
        assert_eq!(
            split_dataset(vec![], &c, &SplitConfig::default()).unwrap_err(),
            SplitError::TooFewTrajectories(1)
        );
        let cfg = SplitConfig {
            train_fraction: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            split_dataset(vec![], &corpus(3), &cfg).unwrap_err(),
            SplitError::Fraction { name: "train_fraction", .. }
        ));
    }
}

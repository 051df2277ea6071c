//! Unified agent trajectory format.
//!
//! A trajectory is an ordered list of steps, each pairing a screenshot state
//! with the action taken on it, plus the action-space definition the actions
//! are drawn from. On disk a corpus is one JSONL manifest (one trajectory per
//! line) next to the referenced PNG screenshots.

mod action_spaces;
mod ingest;
mod stats;

pub use action_spaces::builtin_action_space;
pub use ingest::{content_hash, ingest_corpus, read_manifest, write_manifest, IngestError};
pub use stats::{corpus_stats, dedup_states, CorpusManifest, SourceStats, StatePool};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Slack allowed on bounding-box extents to absorb coordinate rounding.
pub const BBOX_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDef {
    pub name: String,
    pub description: String,
}

/// The permissible operations of one data source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpaceDef {
    pub source_name: String,
    pub actions: Vec<ActionDef>,
}

impl ActionSpaceDef {
    pub fn new(source_name: impl Into<String>, actions: &[(&str, &str)]) -> Self {
        Self {
            source_name: source_name.into(),
            actions: actions
                .iter()
                .map(|(name, description)| ActionDef {
                    name: name.to_string(),
                    description: description.to_string(),
                })
                .collect(),
        }
    }

    pub fn contains(&self, operation: &str) -> bool {
        self.actions.iter().any(|a| a.name == operation)
    }

    /// Problems with the definition itself (empty, duplicated names).
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.actions.is_empty() {
            out.push("action space is empty".to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.actions {
            if !seen.insert(a.name.as_str()) {
                out.push(format!("duplicate action name '{}'", a.name));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Screenshot {
    /// Path relative to the corpus root.
    pub path: String,
    pub width: u32,
    pub height: u32,
}

/// One observed state: the screenshot at step `index` (1-based) and its
/// natural-language description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub index: u32,
    pub screenshot: Screenshot,
    pub description: String,
    /// SHA-256 of the screenshot bytes, hex encoded. Filled in at ingest and
    /// never written to the manifest.
    #[serde(skip)]
    pub content_hash: String,
}

/// Corpus-wide address of a state: trajectory id plus 1-based step index.
/// Orders lexicographically by `(trajectory_id, index)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId {
    pub trajectory_id: String,
    pub index: u32,
}

impl StateId {
    pub fn new(trajectory_id: &str, index: u32) -> Self {
        Self {
            trajectory_id: trajectory_id.to_string(),
            index,
        }
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.trajectory_id, self.index)
    }
}

/// Relative bounding box on the screenshot, every field in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("x", self.x),
            ("y", self.y),
            ("width", self.width),
            ("height", self.height),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("target.{name} out of [0,1]"));
            }
        }
        if self.x + self.width > 1.0 + BBOX_EPSILON {
            out.push("target.x + target.width exceeds 1".to_string());
        }
        if self.y + self.height > 1.0 + BBOX_EPSILON {
            out.push("target.y + target.height exceeds 1".to_string());
        }
        out
    }
}

/// A scalar inside a list-valued action argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionValue {
    Text(String),
    List(Vec<Scalar>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub operation: String,
    pub value: Option<ActionValue>,
    pub target: Option<BBox>,
}

/// A state together with the action executed on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub state: StateRecord,
    pub action: ActionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub source: String,
    pub query: String,
    pub action_space: ActionSpaceDef,
    pub steps: Vec<Step>,
}

impl TrajectoryRecord {
    /// Number of steps `n`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State at 1-based step `index`.
    pub fn state(&self, index: u32) -> Option<&StateRecord> {
        let i = usize::try_from(index).ok()?.checked_sub(1)?;
        self.steps.get(i).map(|s| &s.state)
    }
}

/// A single broken invariant. `step` is the 1-based step index when the
/// violation is local to one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: Option<u32>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(step) => write!(f, "step {step}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, step: Option<u32>, message: impl Into<String>) {
        self.violations.push(Violation {
            step,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pass() {
            return f.write_str("pass");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks every structural invariant of a trajectory. Never fails; problems
/// are collected into the report.
pub fn validate_trajectory(t: &TrajectoryRecord) -> ValidationReport {
    let mut report = ValidationReport::default();
    if t.id.is_empty() {
        report.push(None, "id is empty");
    }
    for v in t.action_space.violations() {
        report.push(None, v);
    }
    if t.steps.is_empty() {
        report.push(None, "trajectory has no steps");
    }
    for (pos, step) in t.steps.iter().enumerate() {
        let expected = pos as u32 + 1;
        let state = &step.state;
        let at = Some(expected);
        if state.index != expected {
            report.push(
                at,
                format!("state index {} (expected {expected})", state.index),
            );
        }
        if state.screenshot.width == 0 || state.screenshot.height == 0 {
            report.push(at, "screenshot width and height must be positive");
        }
        if state.screenshot.path.is_empty() {
            report.push(at, "screenshot path is empty");
        }
        let action = &step.action;
        if !t.action_space.contains(&action.operation) {
            report.push(
                at,
                format!(
                    "unknown operation '{}' for action space '{}'",
                    action.operation, t.action_space.source_name
                ),
            );
        }
        if let Some(target) = &action.target {
            for v in target.violations() {
                report.push(at, v);
            }
        }
    }
    report
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn step(index: u32, operation: &str, target: Option<BBox>) -> Step {
        Step {
            state: StateRecord {
                index,
                screenshot: Screenshot {
                    path: format!("img/{index}.png"),
                    width: 64,
                    height: 48,
                },
                description: format!("page {index}"),
                content_hash: String::new(),
            },
            action: ActionRecord {
                operation: operation.to_string(),
                value: None,
                target,
            },
        }
    }

    pub fn mind2web_record(n: u32) -> TrajectoryRecord {
        TrajectoryRecord {
            id: "t1".into(),
            source: "mind2web".into(),
            query: "Buy a t-shirt".into(),
            action_space: builtin_action_space("mind2web").unwrap(),
            steps: (1..=n).map(|i| step(i, "click", None)).collect(),
        }
    }

    #[test]
    fn well_formed_record_passes() {
        let t = mind2web_record(3);
        assert!(validate_trajectory(&t).is_pass());
    }

    #[test]
    fn bbox_out_of_range_is_named() {
        let mut t = mind2web_record(2);
        t.steps[1].action.target = Some(BBox {
            x: 1.2,
            y: 0.1,
            width: 0.0,
            height: 0.1,
        });
        let report = validate_trajectory(&t);
        assert!(!report.is_pass());
        let v = &report.violations[0];
        assert_eq!(v.step, Some(2));
        assert_eq!(v.message, "target.x out of [0,1]");
    }

    #[test]
    fn bbox_extent_tolerates_rounding() {
        let b = BBox {
            x: 0.5,
            y: 0.5,
            width: 0.5000005,
            height: 0.5,
        };
        assert!(b.violations().is_empty());
        let b = BBox { width: 0.51, ..b };
        assert_eq!(b.violations(), vec!["target.x + target.width exceeds 1"]);
    }

    #[test]
    fn unknown_operation_under_mind2web() {
        let mut t = mind2web_record(1);
        t.steps[0].action.operation = "swipe".into();
        let report = validate_trajectory(&t);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].message.contains("unknown operation 'swipe'"));
    }

    #[test]
    fn index_gaps_and_empty_steps() {
        let mut t = mind2web_record(3);
        t.steps[2].state.index = 5;
        let report = validate_trajectory(&t);
        assert!(report.violations[0].message.contains("expected 3"));

        t.steps.clear();
        assert!(!validate_trajectory(&t).is_pass());
    }

    #[test]
    fn duplicate_action_names_rejected() {
        let space = ActionSpaceDef::new("x", &[("click", "a"), ("click", "b")]);
        assert_eq!(space.violations(), vec!["duplicate action name 'click'"]);
        assert!(!ActionSpaceDef::new("x", &[]).violations().is_empty());
    }

    #[test]
    fn value_accepts_string_or_scalar_list() {
        let a: ActionRecord =
            serde_json::from_str(r#"{"operation":"scroll","value":[0.5,12,true,"x"],"target":null}"#)
                .unwrap();
        assert_eq!(
            a.value,
            Some(ActionValue::List(vec![
                Scalar::Float(0.5),
                Scalar::Int(12),
                Scalar::Bool(true),
                Scalar::Text("x".into())
            ]))
        );
        let a: ActionRecord =
            serde_json::from_str(r#"{"operation":"type","value":"hi","target":null}"#).unwrap();
        assert_eq!(a.value, Some(ActionValue::Text("hi".into())));
    }
}

//! Keys and values as interleaved text runs and image slots.
//!
//! A value is a single state (`Observation: [image]`) or a segment prefixed
//! with its action-space definition. A key is the augmented query followed by
//! an optional value-shaped payload. Image slots carry state ids, not pixels.

use std::fmt::Write;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairs::{RetrievalPair, SegmentKind, SegmentRef};
pub use crate::trajectory::StateId;
use crate::trajectory::{ActionRecord, ActionSpaceDef, ActionValue, BBox, Scalar, StateRecord, TrajectoryRecord};

/// Placeholder used when an image slot is rendered as text.
pub const IMAGE_PLACEHOLDER: &str = "[image]";

pub const COORDINATE_NOTE: &str =
    "Positions are represented in relative coordinates within the range [0,1] on the observation screenshot.";

/// Sentinel for image slots in the rendering checked by [`validate`].
const SENTINEL: char = '\u{0}';

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("segment {i}..{j} out of range for trajectory {id} with {n} steps")]
    OutOfRange { id: String, i: u32, j: u32, n: u32 },
    #[error("augmented query is empty")]
    EmptyQuery,
    #[error("trajectory {0} not found")]
    UnknownTrajectory(String),
    #[error("grammar violation: {0}")]
    Grammar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Key,
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Element {
    Text(String),
    Image(StateId),
}

impl Element {
    /// Byte length of the element's text rendering.
    pub fn rendered_len(&self) -> usize {
        match self {
            Element::Text(t) => t.len(),
            Element::Image(_) => IMAGE_PLACEHOLDER.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSequence {
    pub side: Side,
    pub elements: Vec<Element>,
}

impl ContextSequence {
    fn new(side: Side) -> Self {
        Self {
            side,
            elements: Vec::new(),
        }
    }

    fn text(&mut self, s: impl Into<String>) {
        self.elements.push(Element::Text(s.into()));
    }

    fn image(&mut self, id: StateId) {
        self.elements.push(Element::Image(id));
    }

    /// Text rendering with every image slot shown as `[image]`.
    pub fn render(&self) -> String {
        self.render_with(IMAGE_PLACEHOLDER)
    }

    fn render_with(&self, placeholder: &str) -> String {
        let mut out = String::with_capacity(self.rendered_len());
        for e in &self.elements {
            match e {
                Element::Text(t) => out.push_str(t),
                Element::Image(_) => out.push_str(placeholder),
            }
        }
        out
    }

    pub fn rendered_len(&self) -> usize {
        self.elements.iter().map(Element::rendered_len).sum()
    }

    /// State ids of the image slots, in order.
    pub fn state_ids(&self) -> Vec<&StateId> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Image(id) => Some(id),
                Element::Text(_) => None,
            })
            .collect()
    }

    pub fn image_count(&self) -> usize {
        self.state_ids().len()
    }
}

/// One line of a serialized context file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub pair_id: usize,
    pub side: Side,
    pub elements: Vec<Element>,
}

impl ContextRecord {
    pub fn new(pair_id: usize, seq: ContextSequence) -> Self {
        Self {
            pair_id,
            side: seq.side,
            elements: seq.elements,
        }
    }

    pub fn into_sequence(self) -> ContextSequence {
        ContextSequence {
            side: self.side,
            elements: self.elements,
        }
    }
}

/// `Observation: [image]`.
pub fn serialize_state(trajectory_id: &str, s: &StateRecord) -> ContextSequence {
    let mut seq = ContextSequence::new(Side::Value);
    seq.text("Observation: ");
    seq.image(StateId::new(trajectory_id, s.index));
    seq
}

fn push_json_string(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

/// Four decimals, ties to even on the exact binary value.
fn push_fixed(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.4}");
}

fn push_scalar(out: &mut String, s: &Scalar) {
    match s {
        Scalar::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Scalar::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Scalar::Float(f) => push_fixed(out, *f),
        Scalar::Text(t) => push_json_string(out, t),
        Scalar::Null => out.push_str("null"),
    }
}

fn push_bbox(out: &mut String, b: &BBox) {
    for (k, (name, v)) in [("x", b.x), ("y", b.y), ("width", b.width), ("height", b.height)]
        .into_iter()
        .enumerate()
    {
        out.push_str(if k == 0 { "{" } else { ", " });
        let _ = write!(out, "\"{name}\": ");
        push_fixed(out, v);
    }
    out.push('}');
}

/// `Action i: {"operation": ..., "value": ..., "target": {...}}`.
pub fn serialize_action(a: &ActionRecord, index: u32) -> String {
    let mut out = format!("Action {index}: {{\"operation\": ");
    push_json_string(&mut out, &a.operation);
    out.push_str(", \"value\": ");
    match &a.value {
        None => out.push_str("null"),
        Some(ActionValue::Text(t)) => push_json_string(&mut out, t),
        Some(ActionValue::List(items)) => {
            out.push('[');
            for (k, s) in items.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                push_scalar(&mut out, s);
            }
            out.push(']');
        }
    }
    out.push_str(", \"target\": ");
    match &a.target {
        None => out.push_str("null"),
        Some(b) => push_bbox(&mut out, b),
    }
    out.push('}');
    out
}

/// `Action Space:` header, numbered definitions and the coordinate note, each
/// on its own line.
pub fn action_space_preamble(space: &ActionSpaceDef) -> String {
    let mut out = String::from("Action Space:\n");
    for (k, a) in space.actions.iter().enumerate() {
        let _ = writeln!(out, "{}. {}: {}", k + 1, a.name, a.description);
    }
    out.push_str(COORDINATE_NOTE);
    out.push('\n');
    out
}

/// Steps `i..=j` of `t` behind the action-space preamble. Blocks are numbered
/// from 1 whatever `i` is; image slots keep the absolute state ids.
pub fn serialize_segment(t: &TrajectoryRecord, i: u32, j: u32) -> Result<ContextSequence, ContextError> {
    let n = t.len() as u32;
    if !(1 <= i && i <= j && j <= n) {
        return Err(ContextError::OutOfRange {
            id: t.id.clone(),
            i,
            j,
            n,
        });
    }
    let mut seq = ContextSequence::new(Side::Value);
    let mut text = action_space_preamble(&t.action_space);
    for (k, step) in t.steps[(i - 1) as usize..j as usize].iter().enumerate() {
        let k = k as u32 + 1;
        if k > 1 {
            text.push('\n');
        }
        let _ = write!(text, "Observation {k}: ");
        seq.text(std::mem::take(&mut text));
        seq.image(StateId::new(&t.id, step.state.index));
        text.push('\n');
        text.push_str(&serialize_action(&step.action, k));
    }
    seq.text(text);
    Ok(seq)
}

/// The value side of `seg`.
pub fn serialize_value(t: &TrajectoryRecord, seg: &SegmentRef) -> Result<ContextSequence, ContextError> {
    match seg.kind {
        SegmentKind::State => t
            .state(seg.i)
            .map(|s| serialize_state(&t.id, s))
            .ok_or_else(|| ContextError::OutOfRange {
                id: t.id.clone(),
                i: seg.i,
                j: seg.j,
                n: t.len() as u32,
            }),
        SegmentKind::Interval | SegmentKind::Full => serialize_segment(t, seg.i, seg.j),
    }
}

/// `q̃`, then a newline and the payload when there is one.
pub fn serialize_key(query: &str, payload: Option<ContextSequence>) -> Result<ContextSequence, ContextError> {
    if query.trim().is_empty() {
        return Err(ContextError::EmptyQuery);
    }
    let mut seq = ContextSequence::new(Side::Key);
    seq.text(query);
    if let Some(p) = payload {
        seq.text("\n");
        seq.elements.extend(p.elements);
    }
    Ok(seq)
}

/// Key and value sequences of a pair. `lookup` maps a trajectory id to its
/// record.
pub fn serialize_pair<'a>(
    pair: &RetrievalPair,
    lookup: impl Fn(&str) -> Option<&'a TrajectoryRecord>,
) -> Result<(ContextSequence, ContextSequence), ContextError> {
    let find = |id: &str| lookup(id).ok_or_else(|| ContextError::UnknownTrajectory(id.to_string()));
    let payload = match &pair.key_segment {
        Some(seg) => Some(serialize_value(find(&seg.trajectory_id)?, seg)?),
        None => None,
    };
    let key = serialize_key(&pair.key_query, payload)?;
    let value = serialize_value(find(pair.trajectory_id())?, &pair.value_segment)?;
    Ok((key, value))
}

static STATE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new("^Observation: \x00$").unwrap());
static PREAMBLE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"^Action Space:\n(?:\d+\. [^\n:]+: [^\n]*\n)+{}\n",
        regex::escape(COORDINATE_NOTE)
    ))
    .unwrap()
});
static BLOCK_RE: LazyLock<Regex> = LazyLock::new(|| {
    let string = r#""(?:[^"\\\n]|\\.)*""#;
    let num = r"\d\.\d{4}";
    let bbox = format!(r#"\{{"x": {num}, "y": {num}, "width": {num}, "height": {num}\}}"#);
    let value = format!(r"(?:null|{string}|\[[^\n\x00]*\])");
    Regex::new(&format!(
        r#"^Observation (\d+): \x00\nAction (\d+): \{{"operation": {string}, "value": {value}, "target": (?:null|{bbox})\}}"#
    ))
    .unwrap()
});

fn validate_value(body: &str) -> Result<(), String> {
    if STATE_RE.is_match(body) {
        return Ok(());
    }
    let pre = PREAMBLE_RE
        .find(body)
        .ok_or_else(|| "expected a single observation or an action-space preamble".to_string())?;
    let mut rest = &body[pre.end()..];
    let mut expected = 1u32;
    loop {
        let caps = BLOCK_RE
            .captures(rest)
            .ok_or_else(|| format!("malformed observation/action block {expected}"))?;
        let (obs, act): (u32, u32) = (caps[1].parse().unwrap_or(0), caps[2].parse().unwrap_or(0));
        if obs != expected || act != expected {
            return Err(format!("block numbered {obs}/{act}, expected {expected}"));
        }
        rest = &rest[caps.get(0).unwrap().end()..];
        if rest.is_empty() {
            return Ok(());
        }
        rest = rest
            .strip_prefix('\n')
            .ok_or_else(|| format!("unexpected text after block {expected}"))?;
        expected += 1;
    }
}

/// Checks a sequence against the key/value grammar.
pub fn validate(seq: &ContextSequence) -> Result<(), ContextError> {
    let err = |m: String| Err(ContextError::Grammar(m));
    for e in &seq.elements {
        if let Element::Text(t) = e {
            if t.contains(SENTINEL) {
                return err("text run contains a NUL character".into());
            }
        }
    }
    let rendered = seq.render_with("\u{0}");
    if rendered.lines().any(|l| l.ends_with(' ') && !l.ends_with(": \u{0}")) {
        return err("trailing whitespace".into());
    }
    let body = match seq.side {
        Side::Value => rendered.as_str(),
        Side::Key => {
            let Some(Element::Text(q)) = seq.elements.first() else {
                return err("key must start with the augmented query".into());
            };
            if q.trim().is_empty() || q.contains('\n') {
                return err("augmented query must be a single non-empty line".into());
            }
            let rest = &rendered[q.len()..];
            if rest.is_empty() {
                return Ok(());
            }
            match rest.strip_prefix('\n') {
                Some(r) => r,
                None => return err("augmented query must be followed by a newline".into()),
            }
        }
    };
    validate_value(body).or_else(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::mind2web_record;

    fn bbox(x: f64, y: f64, width: f64, height: f64) -> BBox {
        BBox { x, y, width, height }
    }

    #[test]
    fn elon_musk_action_line() {
        let a = ActionRecord {
            operation: "type".into(),
            value: Some(ActionValue::Text("Elon Musk".into())),
            target: Some(bbox(0.5704, 0.2142, 0.3678, 0.0663)),
        };
        assert_eq!(
            serialize_action(&a, 3),
            r#"Action 3: {"operation": "type", "value": "Elon Musk", "target": {"x": 0.5704, "y": 0.2142, "width": 0.3678, "height": 0.0663}}"#
        );
    }

    #[test]
    fn null_fields_and_rounding() {
        let a = ActionRecord {
            operation: "click".into(),
            value: None,
            target: None,
        };
        assert_eq!(
            serialize_action(&a, 1),
            r#"Action 1: {"operation": "click", "value": null, "target": null}"#
        );
        let a = ActionRecord {
            target: Some(bbox(1.0 / 3.0, 0.03125, 0.00005, 0.0)),
            ..a
        };
        assert!(serialize_action(&a, 1)
            .ends_with(r#"{"x": 0.3333, "y": 0.0312, "width": 0.0001, "height": 0.0000}}"#));
    }

    #[test]
    fn list_values_and_escaping() {
        let a = ActionRecord {
            operation: "scroll".into(),
            value: Some(ActionValue::List(vec![
                Scalar::Float(0.5),
                Scalar::Int(3),
                Scalar::Bool(true),
                Scalar::Text("a\"b".into()),
                Scalar::Null,
            ])),
            target: None,
        };
        assert_eq!(
            serialize_action(&a, 2),
            r#"Action 2: {"operation": "scroll", "value": [0.5000, 3, true, "a\"b", null], "target": null}"#
        );
    }

    #[test]
    fn state_is_observation_and_slot() {
        let t = mind2web_record(2);
        let a = serialize_state("t1", t.state(1).unwrap());
        let b = serialize_state("t1", t.state(2).unwrap());
        assert_eq!(a.render(), "Observation: [image]");
        assert_eq!(a.elements[0], b.elements[0]);
        assert_ne!(a.elements[1], b.elements[1]);
        validate(&a).unwrap();
    }

    #[test]
    fn segment_numbering_restarts() {
        let t = mind2web_record(4);
        let seq = serialize_segment(&t, 2, 3).unwrap();
        let r = seq.render();
        assert!(r.contains("\nObservation 1: [image]\nAction 1: "));
        assert!(r.contains("\nObservation 2: [image]\nAction 2: "));
        assert!(!r.contains("Observation 3"));
        assert!(!r.ends_with('\n'));
        let ids: Vec<u32> = seq.state_ids().iter().map(|s| s.index).collect();
        assert_eq!(ids, [2, 3]);
        validate(&seq).unwrap();
        assert!(matches!(
            serialize_segment(&t, 3, 5),
            Err(ContextError::OutOfRange { .. })
        ));
    }

    #[test]
    fn key_with_and_without_payload() {
        let t = mind2web_record(3);
        let k = serialize_key("Find it.", None).unwrap();
        assert_eq!(k.image_count(), 0);
        validate(&k).unwrap();
        let k = serialize_key("Find it.", Some(serialize_segment(&t, 1, 3).unwrap())).unwrap();
        assert!(k.render().starts_with("Find it.\nAction Space:\n1. click: "));
        assert_eq!(k.image_count(), 3);
        validate(&k).unwrap();
        assert_eq!(k.render().len(), k.rendered_len());
        assert_eq!(serialize_key(" ", None), Err(ContextError::EmptyQuery));
    }

    #[test]
    fn validator_rejects_mutations() {
        let t = mind2web_record(2);
        let good = serialize_segment(&t, 1, 2).unwrap();
        let mutate = |f: &dyn Fn(&mut ContextSequence)| {
            let mut s = good.clone();
            f(&mut s);
            validate(&s).is_err()
        };
        assert!(mutate(&|s| {
            s.elements.remove(1);
        }));
        assert!(mutate(&|s| {
            if let Element::Text(t) = &mut s.elements[2] {
                *t = t.replace("Observation 2", "Observation 3");
            }
        }));
        assert!(mutate(&|s| {
            if let Element::Text(t) = &mut s.elements[0] {
                *t = t.replace("Action Space:", "Actions:");
            }
        }));
        assert!(mutate(&|s| {
            if let Element::Text(t) = s.elements.last_mut().unwrap() {
                t.push(' ');
            }
        }));
        assert!(mutate(&|s| s.side = Side::Key));
    }

    #[test]
    fn context_record_round_trip() {
        let t = mind2web_record(2);
        let seq = serialize_key("q", Some(serialize_segment(&t, 1, 2).unwrap())).unwrap();
        let line = serde_json::to_string(&ContextRecord::new(4, seq.clone())).unwrap();
        assert!(line.contains(r#"{"image":{"trajectory_id":"t1","index":2}}"#));
        let back: ContextRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.pair_id, 4);
        assert_eq!(back.into_sequence(), seq);
    }
}

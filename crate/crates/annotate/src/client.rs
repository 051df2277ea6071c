use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use trajret_core::pairs::SilverSet;
use trajret_core::trajectory::{StateRecord, TrajectoryRecord};

use crate::mock::{Lexicon, MockResponder};
use crate::prompts::{alternatives_prompt, ner_prompt, rewrite_prompt, Stage, DESCRIBE_PROMPT};
use crate::transport::{ChatRequest, HttpTransport, Transport, TransportError, Unreachable};
use crate::{AnnotateError, NerEntity};

pub const MOCK_ENDPOINT: &str = "mock";

/// Where and how annotation requests are sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationBackend {
    /// Chat-completions URL, or `"mock"`.
    pub endpoint: String,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub max_in_flight: usize,
    /// JSON lexicon for the mock backend; the built-in one when unset.
    pub lexicon: Option<PathBuf>,
}

impl Default for AnnotationBackend {
    fn default() -> Self {
        Self {
            endpoint: MOCK_ENDPOINT.into(),
            model_name: "gpt-4o-mini-2024-07-18".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            token_env: "TRAJRET_API_TOKEN".into(),
            max_in_flight: 4,
            lexicon: None,
        }
    }
}

impl AnnotationBackend {
    pub fn is_mock(&self) -> bool {
        self.endpoint == MOCK_ENDPOINT
    }

    pub fn check(&self) -> Result<(), AnnotateError> {
        if !self.is_mock() && !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(AnnotateError::Config(format!(
                "endpoint must be an http(s) URL or \"mock\", got {:?}",
                self.endpoint
            )));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(AnnotateError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(AnnotateError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Exponential backoff: the k-th retry waits `base * factor^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl Backoff {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32))
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays instead of sleeping.
#[derive(Default)]
pub struct RecordingSleeper {
    delays: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().expect("sleeper lock").clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.delays.lock().expect("sleeper lock").push(d);
    }
}

/// One audited request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    pub stage: Stage,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    pub response: Option<String>,
    pub error: Option<String>,
    pub attempts: u32,
    pub latency_ms: f64,
}

/// JSONL sink for audit records, shared across worker threads.
pub struct AuditLog {
    sink: Mutex<Box<dyn Write + Send>>,
}

impl AuditLog {
    pub fn new(sink: Box<dyn Write + Send>) -> Self {
        Self { sink: Mutex::new(sink) }
    }

    pub fn create(path: &Path) -> Result<Self, AnnotateError> {
        let file = std::fs::File::create(path).map_err(|source| AnnotateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(Box::new(std::io::BufWriter::new(file))))
    }

    fn append(&self, record: &AuditRecord) {
        let line = serde_json::to_string(record).expect("audit records serialize");
        let mut sink = self.sink.lock().expect("audit lock");
        if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
            log::warn!("cannot write audit record {}: {e}", record.id);
        }
    }
}

/// A silver set with the intermediate results of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverOutcome {
    pub silver: SilverSet,
    pub entities: Vec<NerEntity>,
    pub alternatives: BTreeMap<String, Vec<String>>,
    /// Entity-substituted queries handed to the rewrite stage.
    pub candidates: Vec<String>,
}

pub struct Annotator {
    backend: AnnotationBackend,
    transport: Arc<dyn Transport>,
    mock: MockResponder,
    backoff: Backoff,
    sleeper: Arc<dyn Sleeper>,
    audit: Option<AuditLog>,
}

/// The JSON value embedded in a completion, tolerating code fences and prose.
fn extract_json(text: &str) -> Option<Value> {
    let start = text.find(['[', '{'])?;
    let close = if text[start..].starts_with('[') { ']' } else { '}' };
    let end = text.rfind(close)?;
    if end < start {
        return None;
    }
    serde_json::from_str(&text[start..=end]).ok()
}

/// First sentence of `text` with whitespace collapsed.
fn single_sentence(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let cut = collapsed
        .match_indices(['.', '!', '?'])
        .map(|(k, _)| k + 1)
        .find(|&k| collapsed[k..].starts_with(' '));
    match cut {
        Some(k) => collapsed[..k].to_string(),
        None => collapsed,
    }
}

/// Places reported entity surfaces in `q` left to right, without overlaps.
fn locate_entities(q: &str, reported: Vec<(String, String)>) -> Vec<NerEntity> {
    let chars: Vec<char> = q.chars().collect();
    let mut taken = vec![false; chars.len()];
    let mut out = Vec::new();
    for (surface, label) in reported {
        let pattern: Vec<char> = surface.chars().collect();
        if pattern.is_empty() || pattern.len() > chars.len() {
            continue;
        }
        let found = (0..=chars.len() - pattern.len())
            .find(|&k| chars[k..k + pattern.len()] == pattern[..] && !taken[k..k + pattern.len()].iter().any(|t| *t));
        match found {
            Some(k) => {
                taken[k..k + pattern.len()].iter_mut().for_each(|t| *t = true);
                out.push(NerEntity {
                    surface,
                    label,
                    span: (k, k + pattern.len()),
                });
            }
            None => log::warn!("entity {surface:?} not found in query {q:?}; dropped"),
        }
    }
    out.sort_by_key(|e| e.span);
    out
}

/// `q` with every entity replaced by its `k`-th alternative.
fn substitute(q: &str, entities: &[NerEntity], alternatives: &BTreeMap<String, Vec<String>>, k: usize) -> String {
    let chars: Vec<char> = q.chars().collect();
    let mut out = String::with_capacity(q.len());
    let mut pos = 0;
    for e in entities {
        out.extend(&chars[pos..e.span.0]);
        out.push_str(&alternatives[&e.surface][k]);
        pos = e.span.1;
    }
    out.extend(&chars[pos..]);
    out
}

impl Annotator {
    /// Builds the client for `backend`. HTTP backends read the bearer token
    /// from the configured environment variable, if set.
    pub fn new(backend: AnnotationBackend) -> Result<Self, AnnotateError> {
        backend.check()?;
        let transport: Arc<dyn Transport> = if backend.is_mock() {
            Arc::new(Unreachable)
        } else {
            let token = std::env::var(&backend.token_env).ok();
            if token.is_none() {
                log::warn!("{} is not set; sending requests without a bearer token", backend.token_env);
            }
            let t = HttpTransport::new(&backend.endpoint, token, Duration::from_secs_f64(backend.timeout_secs))
                .map_err(|e| AnnotateError::Config(e.message))?;
            Arc::new(t)
        };
        let lexicon = match &backend.lexicon {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| AnnotateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let parsed: Lexicon = serde_json::from_str(&text)
                    .map_err(|e| AnnotateError::Config(format!("{}: {e}", path.display())))?;
                Lexicon::new(parsed.entries.into_iter().map(|e| (e.surface, e.label)))
            }
            None => Lexicon::default(),
        };
        Ok(Self::with_transport(backend, transport).with_lexicon(lexicon))
    }

    /// Uses `transport` for non-mock requests.
    pub fn with_transport(backend: AnnotationBackend, transport: Arc<dyn Transport>) -> Self {
        Self {
            backend,
            transport,
            mock: MockResponder::default(),
            backoff: Backoff::default(),
            sleeper: Arc::new(ThreadSleeper),
            audit: None,
        }
    }

    pub fn with_lexicon(mut self, lexicon: Lexicon) -> Self {
        self.mock = MockResponder::new(lexicon);
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn backend(&self) -> &AnnotationBackend {
        &self.backend
    }

    /// Sends `request`, retrying retriable failures with backoff. Returns the
    /// completion and the number of attempts made.
    pub fn complete(&self, request: &ChatRequest) -> Result<(String, u32), AnnotateError> {
        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            let outcome = if self.backend.is_mock() {
                self.mock.respond(request)
            } else {
                self.transport.send(&self.backend.model_name, request)
            };
            match outcome {
                Ok(text) => break Ok(text),
                Err(e) if e.retriable && attempts <= self.backend.max_retries => {
                    let delay = self.backoff.delay(attempts - 1);
                    log::warn!(
                        "{} attempt {attempts} failed: {}; retrying in {:.1} s",
                        request.id,
                        e.message,
                        delay.as_secs_f64()
                    );
                    self.sleeper.sleep(delay);
                }
                Err(e) => break Err(e),
            }
        };
        log::info!("{} finished after {attempts} attempt(s)", request.id);
        if let Some(audit) = &self.audit {
            audit.append(&AuditRecord {
                id: request.id.clone(),
                stage: request.stage,
                prompt: request.prompt.clone(),
                image_sha256: request.image.as_deref().map(trajret_core::trajectory::content_hash),
                response: result.as_ref().ok().cloned(),
                error: result.as_ref().err().map(|e: &TransportError| e.message.clone()),
                attempts,
                latency_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        result
            .map(|text| (text, attempts))
            .map_err(|e| AnnotateError::Transport {
                id: request.id.clone(),
                attempts,
                message: e.message,
            })
    }

    fn run(&self, id: String, stage: Stage, prompt: String, image: Option<Vec<u8>>) -> Result<String, AnnotateError> {
        let request = ChatRequest {
            id,
            stage,
            prompt,
            image,
        };
        self.complete(&request).map(|(text, _)| text)
    }

    /// One-sentence description of a screenshot.
    pub fn describe_state(&self, id: &str, png: &[u8]) -> Result<String, AnnotateError> {
        let text = self.run(format!("{id}/describe"), Stage::Describe, DESCRIBE_PROMPT.into(), Some(png.to_vec()))?;
        let sentence = single_sentence(&text);
        if sentence.is_empty() {
            return Err(AnnotateError::Content {
                id: id.to_string(),
                stage: Stage::Describe,
                message: "empty completion".into(),
            });
        }
        Ok(sentence)
    }

    /// Describes the states of `corpus` whose description is empty (or all of
    /// them with `overwrite`), reading screenshots below `root`. Returns the
    /// number of states described.
    pub fn describe_corpus(
        &self,
        corpus: &mut [TrajectoryRecord],
        root: &Path,
        overwrite: bool,
    ) -> Result<usize, AnnotateError> {
        let work: Vec<(usize, usize, String, PathBuf)> = corpus
            .iter()
            .enumerate()
            .flat_map(|(t, traj)| {
                traj.steps.iter().enumerate().filter_map(move |(s, step)| {
                    let state: &StateRecord = &step.state;
                    (overwrite || state.description.trim().is_empty()).then(|| {
                        (
                            t,
                            s,
                            format!("{}/{}", traj.id, state.index),
                            root.join(&state.screenshot.path),
                        )
                    })
                })
            })
            .collect();
        let descriptions = self.in_pool(|| {
            work.par_iter()
                .map(|(_, _, id, path)| {
                    let png = std::fs::read(path).map_err(|source| AnnotateError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    self.describe_state(id, &png)
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        for ((t, s, _, _), d) in work.iter().zip(descriptions) {
            corpus[*t].steps[*s].state.description = d;
        }
        Ok(work.len())
    }

    /// Runs the entity, alternative and rewrite stages for `query`.
    pub fn generate_silver(&self, trajectory_id: &str, query: &str) -> Result<SilverOutcome, AnnotateError> {
        if query.trim().is_empty() {
            return Err(AnnotateError::Precondition(format!("{trajectory_id}: query is empty")));
        }
        let content = |stage: Stage, message: String| AnnotateError::Content {
            id: trajectory_id.to_string(),
            stage,
            message,
        };

        #[derive(Deserialize)]
        struct Reported {
            #[serde(alias = "entity", alias = "text")]
            surface: String,
            #[serde(alias = "type")]
            label: String,
        }
        let text = self.run(format!("{trajectory_id}/ner"), Stage::Ner, ner_prompt(query), None)?;
        let value = extract_json(&text).ok_or_else(|| content(Stage::Ner, "no JSON in response".into()))?;
        let value = match value {
            Value::Object(mut m) if m.contains_key("entities") => m.remove("entities").expect("key present"),
            v => v,
        };
        let reported: Vec<Reported> =
            serde_json::from_value(value).map_err(|e| content(Stage::Ner, format!("expected entity list: {e}")))?;
        let entities = locate_entities(query, reported.into_iter().map(|r| (r.surface, r.label)).collect());

        let mut alternatives = BTreeMap::new();
        if !entities.is_empty() {
            let ners: Vec<_> = entities
                .iter()
                .map(|e| serde_json::json!({"surface": e.surface, "label": e.label}))
                .collect();
            let ners = serde_json::to_string(&ners).expect("entities serialize");
            let text = self.run(
                format!("{trajectory_id}/alternatives"),
                Stage::Alternatives,
                alternatives_prompt(query, &ners),
                None,
            )?;
            let value =
                extract_json(&text).ok_or_else(|| content(Stage::Alternatives, "no JSON in response".into()))?;
            let parsed: BTreeMap<String, Vec<String>> = serde_json::from_value(value)
                .map_err(|e| content(Stage::Alternatives, format!("expected entity to list map: {e}")))?;
            for e in &entities {
                let alts = parsed
                    .get(&e.surface)
                    .ok_or_else(|| content(Stage::Alternatives, format!("no alternatives for {:?}", e.surface)))?;
                if alts.len() < 5 {
                    return Err(content(
                        Stage::Alternatives,
                        format!("{} alternatives for {:?}, need 5", alts.len(), e.surface),
                    ));
                }
                alternatives.insert(e.surface.clone(), alts[..5].to_vec());
            }
        }
        let candidates: Vec<String> = (0..5).map(|k| substitute(query, &entities, &alternatives, k)).collect();

        let text = self.run(
            format!("{trajectory_id}/rewrite"),
            Stage::Rewrite,
            rewrite_prompt(&candidates),
            None,
        )?;
        let value = extract_json(&text).ok_or_else(|| content(Stage::Rewrite, "no JSON in response".into()))?;
        let rewrites: Vec<String> = serde_json::from_value(value)
            .map_err(|e| content(Stage::Rewrite, format!("expected a list of queries: {e}")))?;
        let rewrites: Vec<String> = rewrites.into_iter().map(|r| r.trim().to_string()).collect();
        if rewrites.len() != 5 {
            return Err(content(Stage::Rewrite, format!("{} rewrites, need exactly 5", rewrites.len())));
        }
        let silver = SilverSet {
            trajectory_id: trajectory_id.to_string(),
            gold_query: query.to_string(),
            rewrites,
        };
        let problems = silver.violations();
        if !problems.is_empty() {
            return Err(content(Stage::Rewrite, problems.join("; ")));
        }
        Ok(SilverOutcome {
            silver,
            entities,
            alternatives,
            candidates,
        })
    }

    /// Silver sets for every trajectory, in corpus order.
    pub fn generate_silver_corpus(&self, corpus: &[TrajectoryRecord]) -> Result<Vec<SilverOutcome>, AnnotateError> {
        self.in_pool(|| {
            corpus
                .par_iter()
                .map(|t| self.generate_silver(&t.id, &t.query))
                .collect()
        })
    }

    /// Runs `f` with at most `max_in_flight` concurrent requests.
    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(self.backend.max_in_flight)
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("cannot build request pool ({e}); running on the global pool");
                f()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_is_found_inside_prose_and_fences() {
        assert_eq!(extract_json("```json\n[1, 2]\n```").unwrap(), serde_json::json!([1, 2]));
        assert_eq!(extract_json("Here: {\"a\": 1} done").unwrap(), serde_json::json!({"a": 1}));
        assert!(extract_json("nothing").is_none());
    }

    #[test]
    fn first_sentence_only() {
        assert_eq!(single_sentence("  A page.\nWith more. "), "A page.");
        assert_eq!(single_sentence("Version 2.5 of a page"), "Version 2.5 of a page");
    }

    #[test]
    fn backoff_doubles() {
        let b = Backoff::default();
        assert_eq!(
            (0..3).map(|k| b.delay(k)).collect::<Vec<_>>(),
            [1, 2, 4].map(Duration::from_secs)
        );
    }

    #[test]
    fn entities_do_not_overlap() {
        let found = locate_entities(
            "Buy a laser printer",
            vec![("laser printer".into(), "product".into()), ("printer".into(), "product".into())],
        );
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].span, (6, 19));
    }
}

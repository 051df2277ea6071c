use std::sync::{Arc, Mutex};
use std::time::Duration;

use trajret_annotate::{
    build_html_render_prompt, AnnotateError, AnnotationBackend, Annotator, AuditLog, ChatRequest, CountingTransport,
    RecordingSleeper, Stage, Transport, TransportError,
};
use trajret_core::synth::{generate, SynthConfig};

fn mock() -> Annotator {
    Annotator::new(AnnotationBackend::default()).unwrap()
}

/// Fails the first `failures` calls, then answers every stage like a model would.
struct Scripted {
    failures: usize,
    calls: Mutex<usize>,
}

impl Transport for Scripted {
    fn send(&self, _model: &str, request: &ChatRequest) -> Result<String, TransportError> {
        let mut calls = self.calls.lock().unwrap();
        *calls += 1;
        if *calls <= self.failures {
            return Err(TransportError::retriable("HTTP 503"));
        }
        Ok(match request.stage {
            Stage::Describe => "A search page.  It has a box.".into(),
            Stage::Ner => "```json\n[{\"surface\": \"Amazon\", \"label\": \"platform\"}]\n```".into(),
            Stage::Alternatives => r#"{"Amazon": ["eBay", "Etsy", "Walmart", "Target", "Zalando"]}"#.into(),
            Stage::Rewrite => r#"["Buy a t-shirt on eBay", "Get a t-shirt from Etsy", "Shop Walmart for a t-shirt", "Find a t-shirt at Target", "Order a t-shirt on Zalando"]"#.into(),
        })
    }
}

fn http_backend(max_retries: u32) -> AnnotationBackend {
    AnnotationBackend {
        endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
        max_retries,
        ..AnnotationBackend::default()
    }
}

#[test]
fn mock_silver_is_deterministic_and_valid() {
    let q = "Buy a t-shirt for children on Amazon";
    let a = mock().generate_silver("t1", q).unwrap();
    let b = mock().generate_silver("t1", q).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.silver.rewrites.len(), 5);
    assert!(a.silver.violations().is_empty());
    let surfaces: Vec<_> = a.entities.iter().map(|e| e.surface.as_str()).collect();
    assert!(surfaces.contains(&"Amazon"), "{surfaces:?}");
    for (k, c) in a.candidates.iter().enumerate() {
        for e in &a.entities {
            assert!(c.contains(&a.alternatives[&e.surface][k]), "{c}");
        }
    }
}

#[test]
fn query_without_entities_gets_paraphrases() {
    let out = mock().generate_silver("t2", "scroll down and go back").unwrap();
    assert!(out.entities.is_empty());
    assert!(out.silver.violations().is_empty());
    assert!(out.silver.rewrites.iter().all(|r| r != "scroll down and go back"));
}

#[test]
fn empty_query_is_rejected() {
    assert!(matches!(
        mock().generate_silver("t3", "  "),
        Err(AnnotateError::Precondition(_))
    ));
}

#[test]
fn retries_back_off_then_succeed() {
    let transport = Arc::new(Scripted {
        failures: 2,
        calls: Mutex::new(0),
    });
    let sleeper = Arc::new(RecordingSleeper::default());
    let annotator = Annotator::with_transport(http_backend(3), transport.clone()).with_sleeper(sleeper.clone());
    let request = ChatRequest {
        id: "s/1".into(),
        stage: Stage::Describe,
        prompt: "p".into(),
        image: Some(vec![1, 2, 3]),
    };
    let (text, attempts) = annotator.complete(&request).unwrap();
    assert_eq!(text, "A search page.  It has a box.");
    assert_eq!(attempts, 3);
    assert_eq!(sleeper.delays(), [Duration::from_secs(1), Duration::from_secs(2)]);
}

#[test]
fn retries_are_bounded() {
    let transport = Arc::new(Scripted {
        failures: 10,
        calls: Mutex::new(0),
    });
    let sleeper = Arc::new(RecordingSleeper::default());
    let annotator = Annotator::with_transport(http_backend(2), transport.clone()).with_sleeper(sleeper);
    match annotator.describe_state("s/1", b"png") {
        Err(AnnotateError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(*transport.calls.lock().unwrap(), 3);
}

#[test]
fn model_output_is_cleaned() {
    let transport = Arc::new(Scripted {
        failures: 0,
        calls: Mutex::new(0),
    });
    let annotator = Annotator::with_transport(http_backend(0), transport);
    assert_eq!(annotator.describe_state("s/1", b"png").unwrap(), "A search page.");
    let out = annotator.generate_silver("t", "Buy a t-shirt on Amazon").unwrap();
    assert_eq!(out.candidates[0], "Buy a t-shirt on eBay");
    assert!(out.silver.violations().is_empty());
}

#[test]
fn mock_never_touches_the_transport() {
    let counting = Arc::new(CountingTransport::new(trajret_annotate::transport::Unreachable));
    let annotator = Annotator::with_transport(AnnotationBackend::default(), counting.clone());
    annotator.generate_silver("t", "Book a hotel in Berlin").unwrap();
    annotator.describe_state("s", b"bytes").unwrap();
    assert_eq!(counting.calls(), 0);
}

#[test]
fn mock_descriptions_name_the_screenshot() {
    let d = mock().describe_state("s", b"bytes").unwrap();
    assert!(d.starts_with("Mock description of "), "{d}");
    assert_ne!(d, mock().describe_state("s", b"other").unwrap());
}

#[test]
fn html_prompt_substitutes_placeholders_once() {
    let p = build_html_render_prompt("<div id=\"7\">{id}</div>", "7", "Click [7]").unwrap();
    assert!(p.contains("HTML: <div id=\"7\">{id}</div>. Ensure"));
    assert!(p.ends_with("includes the ID [7] (mentioned in Click [7]) with the same element exactly as provided."));
    assert!(matches!(
        build_html_render_prompt("", "7", "c"),
        Err(AnnotateError::Precondition(_))
    ));
}

#[test]
fn corpus_annotation_fills_descriptions_and_audits() {
    let corpus = generate(&SynthConfig {
        trajectories: 4,
        seed: 5,
        ..SynthConfig::default()
    });
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let audit_path = dir.path().join("audit.jsonl");
    let annotator = mock().with_audit(AuditLog::create(&audit_path).unwrap());
    let mut records = corpus.trajectories.clone();
    let n = annotator.describe_corpus(&mut records, dir.path(), true).unwrap();
    let states: usize = records.iter().map(|t| t.steps.len()).sum();
    assert_eq!(n, states);
    assert!(records
        .iter()
        .flat_map(|t| &t.steps)
        .all(|s| s.state.description.starts_with("Mock description of ")));
    let silver = annotator.generate_silver_corpus(&records).unwrap();
    assert_eq!(silver.len(), records.len());
    drop(annotator);
    let lines = std::fs::read_to_string(&audit_path).unwrap();
    let lines: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= states + 2 * records.len());
    assert!(lines.iter().all(|l| l["attempts"] == 1 && l["error"].is_null()));
}

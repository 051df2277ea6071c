//! Request transport: the HTTP chat-completions client and a counting shim.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use crate::prompts::Stage;

/// One completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    /// Stable identifier used in logs and the audit trail.
    pub id: String,
    pub stage: Stage,
    pub prompt: String,
    /// PNG bytes attached after the prompt text.
    pub image: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct TransportError {
    pub message: String,
    /// Whether retrying can help (timeouts, 429, 5xx).
    pub retriable: bool,
}

impl TransportError {
    pub fn retriable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retriable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retriable: false,
        }
    }
}

/// Sends a request and returns the completion text.
pub trait Transport: Send + Sync {
    fn send(&self, model: &str, request: &ChatRequest) -> Result<String, TransportError>;
}

/// Blocking client for an OpenAI-style `/chat/completions` endpoint.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::fatal(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            url: url.into(),
            token,
        })
    }
}

/// Request body with the prompt as text and the image as a data URL.
pub fn request_body(model: &str, request: &ChatRequest) -> Value {
    let mut content = vec![json!({"type": "text", "text": request.prompt})];
    if let Some(png) = &request.image {
        let data = base64::engine::general_purpose::STANDARD.encode(png);
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{data}")}
        }));
    }
    json!({
        "model": model,
        "temperature": 0,
        "messages": [{"role": "user", "content": content}],
    })
}

/// Completion text of a chat-completions response.
pub fn response_text(body: &Value) -> Result<String, TransportError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::fatal("response has no choices[0].message.content"))
}

impl Transport for HttpTransport {
    fn send(&self, model: &str, request: &ChatRequest) -> Result<String, TransportError> {
        let mut builder = self.client.post(&self.url).json(&request_body(model, request));
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() {
                TransportError::retriable(format!("{}: {e}", self.url))
            } else {
                TransportError::fatal(format!("{}: {e}", self.url))
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let message = format!("{} returned {status}", self.url);
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                TransportError::retriable(message)
            } else {
                TransportError::fatal(message)
            });
        }
        let body: Value = response
            .json()
            .map_err(|e| TransportError::retriable(format!("unreadable response body: {e}")))?;
        response_text(&body)
    }
}

/// Wraps a transport and counts the requests passed through it.
pub struct CountingTransport<T> {
    inner: T,
    calls: AtomicUsize,
}

impl<T> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn send(&self, model: &str, request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(model, request)
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn send(&self, model: &str, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).send(model, request)
    }
}

/// A transport that refuses every request.
pub struct Unreachable;

impl Transport for Unreachable {
    fn send(&self, _model: &str, request: &ChatRequest) -> Result<String, TransportError> {
        Err(TransportError::fatal(format!("no transport configured for {}", request.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_attaches_image_after_text() {
        let r = ChatRequest {
            id: "s1".into(),
            stage: Stage::Describe,
            prompt: "Describe.".into(),
            image: Some(vec![1, 2, 3]),
        };
        let body = request_body("m", &r);
        assert_eq!(body["model"], "m");
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content[0]["text"], "Describe.");
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,AQID");
    }

    #[test]
    fn response_content_is_extracted() {
        let body = json!({"choices": [{"message": {"role": "assistant", "content": "ok"}}]});
        assert_eq!(response_text(&body).unwrap(), "ok");
        assert!(response_text(&json!({"choices": []})).is_err());
    }
}

//! Annotation client: state descriptions, HTML completion prompts and
//! three-stage silver query generation against a chat-completions endpoint
//! or a deterministic offline mock.

mod client;
mod mock;
pub mod prompts;
pub mod transport;

pub use client::{
    AnnotationBackend, Annotator, AuditLog, AuditRecord, Backoff, RecordingSleeper, SilverOutcome, Sleeper,
    ThreadSleeper, MOCK_ENDPOINT,
};
pub use mock::{Lexicon, LexiconEntry, MockResponder};
pub use prompts::{build_html_render_prompt, Stage};
pub use transport::{ChatRequest, CountingTransport, HttpTransport, Transport, TransportError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A named entity located in a query. `span` holds character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerEntity {
    pub surface: String,
    pub label: String,
    pub span: (usize, usize),
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("request {id} failed after {attempts} attempt(s): {message}")]
    Transport {
        id: String,
        attempts: u32,
        message: String,
    },
    #[error("{stage} stage returned unusable content for {id}: {message}")]
    Content { id: String, stage: Stage, message: String },
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

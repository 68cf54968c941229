//! Chat-completion interface used by every generation pipeline.
//!
//! [`ChatClient`] is the seam between pipelines and the inference service.
//! [`OpenAiClient`] speaks the OpenAI-compatible HTTP protocol, [`MockClient`]
//! replays a JSONL fixture, and [`FnClient`] wraps a closure for scripted tests.

mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::example::{estimate_text_tokens, message_text_tokens, ContentItem, Message};

pub use http::{EndpointConfig, OpenAiClient, RetryPolicy, API_KEY_ENV, BASE_URL_ENV};
pub use mock::{FnClient, MockClient, MockMatch, MockRule};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("credential missing: set {0}")]
    MissingCredential(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no mock rule matches request {0:?}")]
    NoMockMatch(String),
    #[error("generation failed: {0}")]
    Failed(String),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_tag: String,
}

impl ChatRequest {
    /// A request with the pipeline defaults: temperature 0, 4096 output tokens.
    pub fn new(model: impl Into<String>, tag: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: 4096,
            request_tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.messages.is_empty() {
            return Err(GenError::InvalidRequest("at least one message is required".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GenError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        for item in self.messages.iter().flat_map(|m| &m.content) {
            if let ContentItem::Image { image_ref } = item {
                if image_ref.is_empty() {
                    return Err(GenError::InvalidRequest("empty image reference".into()));
                }
            }
        }
        Ok(())
    }

    /// Every text item in the request, newline-joined.
    pub fn all_text(&self) -> String {
        self.messages
            .iter()
            .map(Message::joined_text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn image_refs(&self) -> Vec<&str> {
        self.messages
            .iter()
            .flat_map(|m| &m.content)
            .filter_map(|c| match c {
                ContentItem::Image { image_ref } => Some(image_ref.as_str()),
                ContentItem::Text { .. } => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub request_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Number of HTTP attempts (1 for mocks).
    #[serde(default)]
    pub attempts: u32,
}

impl GenerationResult {
    /// A successful result with locally estimated token usage.
    pub fn local(request: &ChatRequest, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            usage: Usage {
                prompt_tokens: message_text_tokens(&request.messages),
                completion_tokens: estimate_text_tokens(&text),
            },
            text,
            finish_reason: FinishReason::Stop,
            request_tag: request.request_tag.clone(),
            error: None,
            attempts: 1,
        }
    }

    pub fn failed(request_tag: &str, error: &GenError) -> Self {
        Self {
            text: String::new(),
            finish_reason: FinishReason::Error,
            usage: Usage::default(),
            request_tag: request_tag.to_string(),
            error: Some(error.to_string()),
            attempts: 0,
        }
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }

    /// The text, or an error if this entry failed.
    pub fn into_text(self) -> Result<String, GenError> {
        match self.finish_reason {
            FinishReason::Error => Err(GenError::Failed(
                self.error.unwrap_or_else(|| "unknown error".into()),
            )),
            _ => Ok(self.text),
        }
    }
}

/// A chat-completion backend. Implementations must be safe to share across
/// worker threads.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, GenError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, GenError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for std::sync::Arc<C> {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, GenError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, GenError> {
        (**self).complete(request)
    }
}

/// Issue `requests` with at most `max_in_flight` outstanding at once.
///
/// Results come back in input order. A failed request yields an error entry
/// at its position; the rest of the batch still runs.
pub fn complete_batch<C: ChatClient + ?Sized>(
    client: &C,
    requests: &[ChatRequest],
    max_in_flight: usize,
) -> Vec<GenerationResult> {
    let workers = max_in_flight.max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| complete_or_error(client, r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<GenerationResult>>> = Mutex::new(vec![None; requests.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(request) = requests.get(i) else { break };
                let result = complete_or_error(client, request);
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every request produces a result"))
        .collect()
}

fn complete_or_error<C: ChatClient + ?Sized>(client: &C, request: &ChatRequest) -> GenerationResult {
    match request.validate().and_then(|_| client.complete(request)) {
        Ok(result) => result,
        Err(e) => GenerationResult::failed(&request.request_tag, &e),
    }
}

/// Run a single request and return its non-empty text.
pub fn complete_text<C: ChatClient + ?Sized>(
    client: &C,
    request: &ChatRequest,
) -> Result<String, GenError> {
    request.validate()?;
    client.complete(request)?.into_text()
}

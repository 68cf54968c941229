use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatClient, ChatRequest, FinishReason, GenError, GenerationResult, Usage};
use crate::example::{ContentItem, Role};

pub const API_KEY_ENV: &str = "GENAI_API_KEY";
pub const BASE_URL_ENV: &str = "GENAI_BASE_URL";

/// Exponential backoff for transient failures (429, 5xx, transport errors).
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub initial_backoff: Duration,
    pub multiplier: f64,
    /// Relative jitter applied to every delay, e.g. 0.2 for ±20%.
    pub jitter: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
            jitter: 0.2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), jittered.
    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let base = self.initial_backoff.as_secs_f64() * self.multiplier.powi(retry as i32);
        let factor = if self.jitter > 0.0 {
            1.0 + rng.gen_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((base * factor).max(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            timeout: Duration::from_secs(600),
            retry: RetryPolicy::default(),
        }
    }

    /// Read `GENAI_BASE_URL` (unless `base_url` is given) and `GENAI_API_KEY`.
    pub fn from_env(base_url: Option<&str>) -> Result<Self, GenError> {
        let base = match base_url {
            Some(b) => b.to_string(),
            None => std::env::var(BASE_URL_ENV)
                .map_err(|_| GenError::InvalidRequest(format!("{BASE_URL_ENV} is not set")))?,
        };
        Ok(Self::new(base, std::env::var(API_KEY_ENV).ok()))
    }
}

/// Blocking client for `POST {base}/v1/chat/completions`.
pub struct OpenAiClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
}

impl OpenAiClient {
    pub fn new(config: EndpointConfig) -> Result<Self, GenError> {
        if config.api_key.as_deref().is_none_or(str::is_empty) {
            return Err(GenError::MissingCredential(API_KEY_ENV.into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GenError::Transport(e.to_string()))?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url)
    }

    fn send_once(&self, body: &Value) -> Result<Value, Attempt> {
        let response = self
            .http
            .post(self.url())
            .bearer_auth(self.config.api_key.as_deref().unwrap_or_default())
            .json(body)
            .send()
            .map_err(|e| Attempt::Transient(format!("transport: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Attempt::Transient(format!("reading body: {e}")))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(GenError::MalformedResponse(e.to_string())));
        }
        let code = status.as_u16();
        if code == 429 || status.is_server_error() {
            Err(Attempt::Transient(format!("HTTP {code}: {text}")))
        } else {
            Err(Attempt::Fatal(GenError::Http {
                status: code,
                body: text,
            }))
        }
    }
}

enum Attempt {
    Transient(String),
    Fatal(GenError),
}

impl ChatClient for OpenAiClient {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, GenError> {
        request.validate()?;
        let body = request_body(request)?;
        let policy = &self.config.retry;
        let mut rng = rand::thread_rng();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.send_once(&body) {
                Ok(value) => {
                    let mut result = parse_response(&value, &request.request_tag)?;
                    result.attempts = attempts;
                    return Ok(result);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(last)) => {
                    if attempts >= policy.max_attempts {
                        return Err(GenError::RetriesExhausted { attempts, last });
                    }
                    tracing::debug!(tag = %request.request_tag, attempts, %last, "retrying");
                    std::thread::sleep(policy.delay(attempts - 1, &mut rng));
                }
            }
        }
    }
}

/// OpenAI-compatible JSON body. Local images are inlined as base64 data URLs.
pub(crate) fn request_body(request: &ChatRequest) -> Result<Value, GenError> {
    let mut messages = Vec::with_capacity(request.messages.len());
    for message in &request.messages {
        let role = match message.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        let mut parts = Vec::with_capacity(message.content.len());
        for item in &message.content {
            parts.push(match item {
                ContentItem::Text { text } => json!({"type": "text", "text": text}),
                ContentItem::Image { image_ref } => {
                    json!({"type": "image_url", "image_url": {"url": image_url(image_ref)?}})
                }
            });
        }
        messages.push(json!({"role": role, "content": parts}));
    }
    Ok(json!({
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }))
}

fn image_url(image_ref: &str) -> Result<String, GenError> {
    if image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let bytes = std::fs::read(image_ref).map_err(|source| GenError::Image {
        path: image_ref.to_string(),
        source,
    })?;
    let mime = match Path::new(image_ref)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn parse_response(value: &Value, tag: &str) -> Result<GenerationResult, GenError> {
    let response: CompletionResponse = serde_json::from_value(value.clone())
        .map_err(|e| GenError::MalformedResponse(e.to_string()))?;
    let choice = response
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GenError::MalformedResponse("no choices".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    let usage = response
        .usage
        .map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    Ok(GenerationResult {
        text: choice.message.content.unwrap_or_default(),
        finish_reason,
        usage,
        request_tag: tag.to_string(),
        error: None,
        attempts: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::Message;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves the scripted statuses in order, one per connection.
    fn scripted_server(statuses: Vec<u16>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for status in statuses {
                let Ok((stream, _)) = listener.accept() else { return };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream);
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let payload = if status == 200 {
                    r#"{"choices":[{"message":{"role":"assistant","content":"Paris"},"finish_reason":"stop"}],"usage":{"prompt_tokens":7,"completion_tokens":1}}"#.to_string()
                } else {
                    format!(r#"{{"error":"status {status}"}}"#)
                };
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                reader.get_mut().write_all(response.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn client(base: &str) -> OpenAiClient {
        let mut config = EndpointConfig::new(base, Some("secret".into()));
        config.retry.initial_backoff = Duration::from_millis(2);
        OpenAiClient::new(config).unwrap()
    }

    fn request() -> ChatRequest {
        ChatRequest::new("teacher", "q1", vec![Message::user_text("capital of France?")])
    }

    #[test]
    fn retries_429_then_succeeds() {
        let (base, hits) = scripted_server(vec![429, 429, 200]);
        let result = client(&base).complete(&request()).unwrap();
        assert_eq!(result.text, "Paris");
        assert_eq!(result.attempts, 3);
        assert_eq!(result.usage.prompt_tokens, 7);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_error_is_not_retried() {
        let (base, hits) = scripted_server(vec![400, 200]);
        let err = client(&base).complete(&request()).unwrap_err();
        assert!(matches!(err, GenError::Http { status: 400, .. }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let (base, hits) = scripted_server(vec![503; 5]);
        let err = client(&base).complete(&request()).unwrap_err();
        assert!(matches!(err, GenError::RetriesExhausted { attempts: 5, .. }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn missing_credential_rejected() {
        let err = OpenAiClient::new(EndpointConfig::new("http://x", None)).err().unwrap();
        assert!(matches!(err, GenError::MissingCredential(_)));
    }

    #[test]
    fn images_inlined_as_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("page.png");
        std::fs::write(&path, b"\x89PNG").unwrap();
        let request = ChatRequest::new(
            "m",
            "t",
            vec![Message::user(vec![
                ContentItem::image(path.to_str().unwrap()),
                ContentItem::text("what?"),
            ])],
        );
        let body = request_body(&request).unwrap();
        let url = body["messages"][0]["content"][0]["image_url"]["url"].as_str().unwrap();
        assert_eq!(url, "data:image/png;base64,iVBORw==");
        assert_eq!(body["messages"][0]["content"][1]["text"], "what?");
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn malformed_response_detected() {
        let err = parse_response(&json!({"choices": []}), "t").unwrap_err();
        assert!(matches!(err, GenError::MalformedResponse(_)));
    }

    #[test]
    fn backoff_doubles_within_jitter() {
        let policy = RetryPolicy::default();
        let mut rng = rand::thread_rng();
        for retry in 0..4 {
            let d = policy.delay(retry, &mut rng).as_secs_f64();
            let base = 2f64.powi(retry as i32);
            assert!(d >= base * 0.8 - 1e-9 && d <= base * 1.2 + 1e-9, "{d}");
        }
    }
}

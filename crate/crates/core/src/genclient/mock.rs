use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatClient, ChatRequest, GenError, GenerationResult};

/// Selects which requests a rule answers. An empty matcher matches everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substring: Option<String>,
}

impl MockMatch {
    fn matches(&self, request: &ChatRequest, text: &str) -> bool {
        self.tag.as_ref().is_none_or(|t| *t == request.request_tag)
            && self.substring.as_ref().is_none_or(|s| text.contains(s.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: MockMatch,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    /// When set, the request fails with this message instead of answering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MockRule {
    pub fn tag(tag: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: MockMatch {
                tag: Some(tag.into()),
                substring: None,
            },
            response_text: response.into(),
            latency_ms: None,
            error: None,
        }
    }

    pub fn substring(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: MockMatch {
                tag: None,
                substring: Some(needle.into()),
            },
            response_text: response.into(),
            latency_ms: None,
            error: None,
        }
    }

    pub fn fallback(response: impl Into<String>) -> Self {
        Self {
            matcher: MockMatch::default(),
            response_text: response.into(),
            latency_ms: None,
            error: None,
        }
    }
}

/// Deterministic client answering from an ordered rule list; the first
/// matching rule wins.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    rules: Vec<MockRule>,
}

impl MockClient {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        let file = File::open(path).map_err(|source| GenError::Image {
            path: path.display().to_string(),
            source,
        })?;
        let mut rules = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GenError::Transport(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: MockRule = serde_json::from_str(&line).map_err(|e| {
                GenError::MalformedResponse(format!("mock fixture line {}: {e}", n + 1))
            })?;
            rules.push(rule);
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[MockRule] {
        &self.rules
    }
}

impl ChatClient for MockClient {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, GenError> {
        let text = request.all_text();
        let rule = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(request, &text))
            .ok_or_else(|| GenError::NoMockMatch(request.request_tag.clone()))?;
        if let Some(ms) = rule.latency_ms {
            std::thread::sleep(Duration::from_millis(ms));
        }
        if let Some(error) = &rule.error {
            return Err(GenError::Failed(error.clone()));
        }
        Ok(GenerationResult::local(request, rule.response_text.clone()))
    }
}

/// Client backed by a closure, for scripted fixtures.
pub struct FnClient<F> {
    respond: F,
}

impl<F> FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, GenError> + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        Self { respond }
    }
}

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, GenError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, GenError> {
        let text = (self.respond)(request)?;
        Ok(GenerationResult::local(request, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::Message;
    use crate::genclient::FinishReason;
    use std::io::Write;

    fn req(tag: &str, text: &str) -> ChatRequest {
        ChatRequest::new("m", tag, vec![Message::user_text(text)])
    }

    #[test]
    fn tag_rule_echoes_response() {
        let mock = MockClient::new(vec![MockRule::tag("q1", "Paris")]);
        let result = mock.complete(&req("q1", "capital of France?")).unwrap();
        assert_eq!(result.text, "Paris");
        assert_eq!(result.finish_reason, FinishReason::Stop);
        assert_eq!(result.request_tag, "q1");
    }

    #[test]
    fn first_matching_rule_wins() {
        let mock = MockClient::new(vec![
            MockRule::substring("revenue", "R"),
            MockRule::fallback("F"),
        ]);
        assert_eq!(mock.complete(&req("a", "what revenue?")).unwrap().text, "R");
        assert_eq!(mock.complete(&req("b", "other")).unwrap().text, "F");
    }

    #[test]
    fn unmatched_request_errors() {
        let mock = MockClient::new(vec![MockRule::tag("q1", "x")]);
        assert!(matches!(mock.complete(&req("q2", "")), Err(GenError::NoMockMatch(_))));
    }

    #[test]
    fn loads_fixture_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"match": {{"tag": "q1"}}, "response_text": "Paris"}}"#).unwrap();
        writeln!(f, r#"{{"match": {{"substring": "slow"}}, "response_text": "late", "latency_ms": 1}}"#).unwrap();
        writeln!(f, r#"{{"match": {{}}, "response_text": "default"}}"#).unwrap();
        let mock = MockClient::load(f.path()).unwrap();
        assert_eq!(mock.rules().len(), 3);
        assert_eq!(mock.complete(&req("q1", "")).unwrap().text, "Paris");
        assert_eq!(mock.complete(&req("z", "slow one")).unwrap().text, "late");
        assert_eq!(mock.complete(&req("z", "")).unwrap().text, "default");
    }
}

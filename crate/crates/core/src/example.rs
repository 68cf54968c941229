//! Multimodal conversation records shared by every pipeline stage.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One item of message content: either text or a page image reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContentItem {
    Text { text: String },
    Image { image_ref: String },
}

impl ContentItem {
    pub fn text(text: impl Into<String>) -> Self {
        ContentItem::Text { text: text.into() }
    }

    pub fn image(image_ref: impl Into<String>) -> Self {
        ContentItem::Image {
            image_ref: image_ref.into(),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ContentItem::Text { text } => Some(text),
            ContentItem::Image { .. } => None,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, ContentItem::Image { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentItem>,
}

impl Message {
    pub fn new(role: Role, content: Vec<ContentItem>) -> Self {
        Self { role, content }
    }

    pub fn user(content: Vec<ContentItem>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::user(vec![ContentItem::text(text)])
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, vec![ContentItem::text(text)])
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, vec![ContentItem::text(text)])
    }

    /// All text items joined with newlines.
    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(ContentItem::as_text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn image_count(&self) -> usize {
        self.content.iter().filter(|c| c.is_image()).count()
    }
}

/// CPT task families, in curriculum difficulty order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LcText,
    Fim,
    Unshuffle,
    RetrievalKey,
    RetrievalPosition,
    Counting,
}

impl TaskKind {
    /// Position in the easy-to-hard curriculum. Both retrieval variants share a tier.
    pub fn difficulty_tier(self) -> u8 {
        match self {
            TaskKind::LcText => 0,
            TaskKind::Fim => 1,
            TaskKind::Unshuffle => 2,
            TaskKind::RetrievalKey | TaskKind::RetrievalPosition => 3,
            TaskKind::Counting => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::LcText => "lc_text",
            TaskKind::Fim => "fim",
            TaskKind::Unshuffle => "unshuffle",
            TaskKind::RetrievalKey => "retrieval_key",
            TaskKind::RetrievalPosition => "retrieval_position",
            TaskKind::Counting => "counting",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "lc_text" | "lc-text" => TaskKind::LcText,
            "fim" => TaskKind::Fim,
            "unshuffle" => TaskKind::Unshuffle,
            "retrieval_key" | "retrieval-key" => TaskKind::RetrievalKey,
            "retrieval_position" | "retrieval-position" => TaskKind::RetrievalPosition,
            "counting" => TaskKind::Counting,
            other => return Err(format!("unknown task kind {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Short,
    Long,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(Stage::Short),
            "long" => Ok(Stage::Long),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Whether a presented page seeded the question or is filler context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Question,
    Filler,
}

/// A training conversation ready for scheduling and packing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub example_id: String,
    pub pipeline: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_kind: Option<TaskKind>,
    pub messages: Vec<Message>,
    pub page_refs: Vec<String>,
    #[serde(default)]
    pub origin_marks: Vec<Origin>,
    /// Page count used for staging; equals `page_refs.len()` for visual examples.
    pub page_count: usize,
    pub token_estimate: u64,
    pub assistant_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<serde_json::Value>,
}

impl TrainingExample {
    pub fn image_count(&self) -> usize {
        self.messages.iter().map(Message::image_count).sum()
    }
}

/// Rough text token count: one token per four characters, rounded up.
pub fn estimate_text_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Text tokens across every text item of the given messages.
pub fn message_text_tokens<'a>(messages: impl IntoIterator<Item = &'a Message>) -> u64 {
    messages
        .into_iter()
        .flat_map(|m| m.content.iter())
        .filter_map(ContentItem::as_text)
        .map(estimate_text_tokens)
        .sum()
}

/// Text tokens in assistant turns, the loss-bearing part of a conversation.
pub fn assistant_tokens(messages: &[Message]) -> u64 {
    message_text_tokens(messages.iter().filter(|m| m.role == Role::Assistant))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_items_use_bare_keys() {
        let items = vec![ContentItem::text("hi"), ContentItem::image("p/1.png")];
        let json = serde_json::to_string(&items).unwrap();
        assert_eq!(json, r#"[{"text":"hi"},{"image_ref":"p/1.png"}]"#);
        let back: Vec<ContentItem> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, items);
    }

    #[test]
    fn text_token_estimate_rounds_up() {
        assert_eq!(estimate_text_tokens(""), 0);
        assert_eq!(estimate_text_tokens("abcde"), 2);
        assert_eq!(estimate_text_tokens("éèàç"), 1);
    }

    #[test]
    fn difficulty_tiers_follow_curriculum() {
        use TaskKind::*;
        let order = [LcText, Fim, Unshuffle, RetrievalKey, Counting];
        assert!(order.windows(2).all(|w| w[0].difficulty_tier() < w[1].difficulty_tier()));
        assert_eq!(RetrievalKey.difficulty_tier(), RetrievalPosition.difficulty_tier());
    }
}

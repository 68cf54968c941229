//! Benchmark item flagging, human decisions and answer expansion.

mod store;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::example::{ContentItem, Message, Origin};
use crate::genclient::{complete_text, ChatRequest};
use crate::sft::{rank_pages, AssembledContext, ContextPage, ContextStrategy, ModelHandle, SftError};
use crate::templates::Templates;

pub use store::{FlagDetail, FlagStatus, FlagSummary, ReviewStats, ReviewStore, ReviewView, StoreError, PROVENANCE_NOTE};

/// Equivalent spellings accepted for unanswerable items.
pub const NOT_ANSWERABLE_FORMS: [&str; 4] = ["Not answerable", "None", "0", "No one"];

#[derive(Debug, thiserror::Error)]
pub enum FlagError {
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error("item {item}: document {doc} does not match")]
    WrongDocument { item: String, doc: String },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Value,
    List,
    NotAnswerable,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Active,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub question: String,
    pub gold_answer: String,
    pub accepted_answers: Vec<String>,
    pub doc_id: String,
    pub answer_kind: AnswerKind,
    pub status: ItemStatus,
    /// Free-form style tag (e.g. "count") used to gate answer expansion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_style: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trail: Vec<TrailEntry>,
}

impl BenchmarkItem {
    pub fn new(item_id: &str, doc_id: &str, question: &str, gold: &str, kind: AnswerKind) -> Self {
        Self {
            item_id: item_id.into(),
            question: question.into(),
            gold_answer: gold.into(),
            accepted_answers: vec![gold.into()],
            doc_id: doc_id.into(),
            answer_kind: kind,
            status: ItemStatus::Active,
            question_style: None,
            trail: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.accepted_answers.contains(&self.gold_answer) {
            return Err(format!("item {}: accepted answers lack the gold answer", self.item_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    DocumentMismatch,
    Underspecified,
    Typo,
    IncorrectAnswer,
    Ok,
}

impl IssueKind {
    pub fn parse(label: &str) -> Option<Self> {
        let norm: String = label
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase()
            .replace([' ', '-'], "_");
        match norm.as_str() {
            "document_mismatch" => Some(Self::DocumentMismatch),
            "underspecified" => Some(Self::Underspecified),
            "typo" => Some(Self::Typo),
            "incorrect_answer" => Some(Self::IncorrectAnswer),
            "ok" => Some(Self::Ok),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagEvidence {
    pub page_id: String,
    pub snippet: String,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagReport {
    pub flag_id: String,
    pub item_id: String,
    pub issue_kind: IssueKind,
    pub rationale: String,
    pub evidence: Vec<FlagEvidence>,
    pub created_by: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Keep,
    Modify,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decision {
    pub flag_id: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub added_accepted_answers: Vec<String>,
    pub reviewer: String,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp_ms: u64,
}

impl Decision {
    pub fn validate(&self) -> Result<(), FlagError> {
        if self.reviewer.trim().is_empty() {
            return Err(FlagError::InvalidDecision("reviewer is required".into()));
        }
        let blank = |s: &Option<String>| s.as_deref().is_none_or(|s| s.trim().is_empty());
        let has_change = !blank(&self.new_question)
            || !blank(&self.new_answer)
            || self.added_accepted_answers.iter().any(|a| !a.trim().is_empty());
        match self.action {
            Action::Modify if !has_change => Err(FlagError::InvalidDecision(
                "modify needs a new question, a new answer or added accepted answers".into(),
            )),
            Action::Keep | Action::Remove if has_change => Err(FlagError::InvalidDecision(format!(
                "{:?} decisions carry no edits",
                self.action
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrailEntry {
    pub flag_id: String,
    pub action: Action,
    pub reviewer: String,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub added_accepted_answers: Vec<String>,
}

/// Apply one review decision, appending a trail entry.
pub fn apply_decision(item: &BenchmarkItem, decision: &Decision) -> Result<BenchmarkItem, FlagError> {
    decision.validate()?;
    let mut out = item.clone();
    let mut entry = TrailEntry {
        flag_id: decision.flag_id.clone(),
        action: decision.action,
        reviewer: decision.reviewer.clone(),
        timestamp_ms: decision.timestamp_ms,
        previous_question: None,
        previous_answer: None,
        added_accepted_answers: Vec::new(),
    };
    match decision.action {
        Action::Keep => {}
        Action::Remove => out.status = ItemStatus::Removed,
        Action::Modify => {
            if let Some(q) = decision.new_question.as_deref().map(str::trim).filter(|q| !q.is_empty()) {
                entry.previous_question = Some(std::mem::replace(&mut out.question, q.to_string()));
            }
            if let Some(a) = decision.new_answer.as_deref().map(str::trim).filter(|a| !a.is_empty()) {
                let old = std::mem::replace(&mut out.gold_answer, a.to_string());
                out.accepted_answers.retain(|x| *x != old);
                push_unique(&mut out.accepted_answers, a);
                entry.previous_answer = Some(old);
            }
            for extra in decision.added_accepted_answers.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
                if push_unique(&mut out.accepted_answers, extra) {
                    entry.added_accepted_answers.push(extra.to_string());
                }
            }
        }
    }
    out.trail.push(entry);
    Ok(out)
}

fn push_unique(list: &mut Vec<String>, value: &str) -> bool {
    if list.iter().any(|x| x == value) {
        false
    } else {
        list.push(value.to_string());
        true
    }
}

/// Which question styles get the not-answerable expansion; `None` enables all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    #[serde(default)]
    pub enabled_styles: Option<BTreeSet<String>>,
}

impl ExpansionConfig {
    fn enabled_for(&self, style: Option<&str>) -> bool {
        match (&self.enabled_styles, style) {
            (None, _) => true,
            (Some(set), Some(s)) => set.contains(s),
            (Some(_), None) => false,
        }
    }
}

pub fn expand_accepted_answers(item: &BenchmarkItem, config: &ExpansionConfig) -> BenchmarkItem {
    let mut out = item.clone();
    if item.status == ItemStatus::Active
        && item.answer_kind == AnswerKind::NotAnswerable
        && config.enabled_for(item.question_style.as_deref())
    {
        for form in NOT_ANSWERABLE_FORMS {
            push_unique(&mut out.accepted_answers, form);
        }
    }
    out
}

/// Parse an `ISSUE:` / `RATIONALE:` verdict.
pub fn parse_flag_verdict(text: &str) -> Option<(IssueKind, String)> {
    let mut issue = None;
    let mut rationale = String::new();
    let mut in_rationale = false;
    for line in text.lines() {
        let upper = line.trim_start().to_ascii_uppercase();
        if let Some(rest) = upper.strip_prefix("ISSUE:") {
            issue = IssueKind::parse(rest);
            in_rationale = false;
        } else if upper.starts_with("RATIONALE:") {
            let at = line.to_ascii_uppercase().find("RATIONALE:").unwrap_or(0) + "RATIONALE:".len();
            rationale = line[at..].trim().to_string();
            in_rationale = true;
        } else if in_rationale && !line.trim().is_empty() {
            rationale.push(' ');
            rationale.push_str(line.trim());
        }
    }
    let issue = issue?;
    if issue != IssueKind::Ok && rationale.is_empty() {
        return None;
    }
    Some((issue, rationale))
}

/// Evidence-first consistency check of an item against its document.
pub fn flag_item(
    item: &BenchmarkItem,
    document: &Document,
    extractor: &ModelHandle,
    judge: &ModelHandle,
    templates: &Templates,
    run_id: &str,
    top_k: usize,
) -> Result<FlagReport, FlagError> {
    if document.doc_id != item.doc_id {
        return Err(FlagError::WrongDocument {
            item: item.item_id.clone(),
            doc: document.doc_id.clone(),
        });
    }
    let context = AssembledContext {
        strategy: ContextStrategy::WholeDocument,
        pages: document.pages.iter().map(|p| ContextPage::from_page(p, Origin::Filler)).collect(),
    };
    let pages = crate::sft::extract_evidence(
        &context,
        &item.question,
        extractor,
        templates,
        "flag_extract",
        &[("answer", &item.gold_answer)],
    )?;
    let relevances: Vec<f64> = pages.iter().map(|p| p.relevance).collect();
    let top: Vec<usize> = rank_pages(&relevances).into_iter().take(top_k.max(1)).collect();
    let evidence_text = top
        .iter()
        .map(|&i| format!("[{}] {}", pages[i].page_id, if pages[i].evidence.is_empty() { "NONE" } else { &pages[i].evidence }))
        .collect::<Vec<_>>()
        .join("\n");
    let mut content: Vec<ContentItem> = top.iter().map(|&i| ContentItem::image(&context.pages[i].image_ref)).collect();
    content.push(ContentItem::text(templates.render(
        "flag_verdict",
        &[("question", &item.question), ("answer", &item.gold_answer), ("evidence", &evidence_text)],
    )));
    let request = ChatRequest::new(judge.model, format!("flag_verdict:{}", item.item_id), vec![Message::user(content)]);
    let reply = complete_text(judge.client, &request).map_err(SftError::from)?;
    let (issue_kind, rationale) =
        parse_flag_verdict(&reply).unwrap_or((IssueKind::Underspecified, "verdict unparseable".to_string()));
    Ok(FlagReport {
        flag_id: format!("{run_id}.{}", item.item_id),
        item_id: item.item_id.clone(),
        issue_kind,
        rationale,
        evidence: top
            .iter()
            .map(|&i| FlagEvidence {
                page_id: pages[i].page_id.clone(),
                snippet: pages[i].evidence.clone(),
                relevance: pages[i].relevance,
            })
            .collect(),
        created_by: run_id.to_string(),
    })
}

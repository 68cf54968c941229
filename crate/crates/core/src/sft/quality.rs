//! Assertion-level quality filter for generated answers.

use serde::{Deserialize, Serialize};

use super::answers::rank_pages;
use super::context::AssembledContext;
use super::parse::{parse_extraction, parse_indexed_lines, parse_numbered_lines, parse_verdict, Verdict};
use super::{ModelHandle, SftError};
use crate::example::{ContentItem, Message};
use crate::genclient::{complete_batch, complete_text, ChatRequest};
use crate::templates::Templates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSnippet {
    pub page_id: String,
    pub position: usize,
    pub relevance: f64,
    /// (1-based assertion number, evidence) pairs.
    pub per_assertion: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionCheck {
    pub number: usize,
    pub assertion: String,
    pub supported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub supported: bool,
    pub checks: Vec<AssertionCheck>,
    pub evidence: Vec<EvidenceSnippet>,
}

impl QualityVerdict {
    pub fn failing(&self) -> impl Iterator<Item = &AssertionCheck> {
        self.checks.iter().filter(|c| !c.supported)
    }
}

fn numbered(assertions: &[String]) -> String {
    assertions
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{}: {a}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Decompose `answer` into assertions, gather per-page evidence, and check
/// that the `top_k` most relevant pages support every assertion.
pub fn quality_check(
    question: &str,
    answer: &str,
    context: &AssembledContext,
    extractor: &ModelHandle,
    checker: &ModelHandle,
    templates: &Templates,
    top_k: usize,
) -> Result<QualityVerdict, SftError> {
    if answer.trim().is_empty() {
        return Err(SftError::Precondition("quality check needs a non-empty answer".into()));
    }
    if context.is_empty() || top_k == 0 {
        return Err(SftError::Precondition("quality check needs pages and top_k >= 1".into()));
    }
    let key = context.key();
    let decompose = ChatRequest::new(
        checker.model,
        format!("quality_decompose:{key}"),
        vec![Message::user_text(
            templates.render("quality_decompose", &[("question", question), ("answer", answer)]),
        )],
    );
    let assertions = parse_numbered_lines(&complete_text(checker.client, &decompose)?);
    if assertions.is_empty() {
        return Err(SftError::NoAssertions);
    }
    let listing = numbered(&assertions);

    let prompt = templates.render("quality_extract", &[("assertions", &listing), ("question", question)]);
    let requests: Vec<_> = context
        .pages
        .iter()
        .map(|p| {
            ChatRequest::new(
                extractor.model,
                format!("quality_extract:{}", p.page_id),
                vec![Message::user(vec![ContentItem::image(&p.image_ref), ContentItem::text(prompt.clone())])],
            )
        })
        .collect();
    let evidence = complete_batch(extractor.client, &requests, extractor.max_in_flight)
        .into_iter()
        .zip(&context.pages)
        .enumerate()
        .map(|(position, (result, page))| {
            let text = result.into_text()?;
            let relevance = parse_extraction(&text).map_or(0.0, |(_, r)| r);
            let per_assertion = parse_indexed_lines(&text)
                .into_iter()
                .filter(|(n, e)| (1..=assertions.len()).contains(n) && !e.eq_ignore_ascii_case("none"))
                .collect();
            Ok(EvidenceSnippet {
                page_id: page.page_id.clone(),
                position,
                relevance,
                per_assertion,
            })
        })
        .collect::<Result<Vec<_>, SftError>>()?;

    let relevances: Vec<f64> = evidence.iter().map(|e| e.relevance).collect();
    let top: Vec<usize> = rank_pages(&relevances).into_iter().take(top_k).collect();
    let evidence_text = top
        .iter()
        .flat_map(|&i| {
            let snippet = &evidence[i];
            snippet
                .per_assertion
                .iter()
                .map(move |(n, e)| format!("[{}] {n}: {e}", snippet.page_id))
        })
        .collect::<Vec<_>>()
        .join("\n");
    let mut content: Vec<ContentItem> = top.iter().map(|&i| ContentItem::image(&context.pages[i].image_ref)).collect();
    content.push(ContentItem::text(
        templates.render("quality_check", &[("assertions", &listing), ("evidence", &evidence_text)]),
    ));
    let check = ChatRequest::new(checker.model, format!("quality_check:{key}"), vec![Message::user(content)]);
    let reply = complete_text(checker.client, &check)?;
    let verdicts = parse_indexed_lines(&reply);
    let checks: Vec<AssertionCheck> = assertions
        .into_iter()
        .enumerate()
        .map(|(i, assertion)| AssertionCheck {
            number: i + 1,
            assertion,
            supported: verdicts
                .iter()
                .find(|(n, _)| *n == i + 1)
                .is_some_and(|(_, v)| parse_verdict(v) == Verdict::Yes),
        })
        .collect();
    Ok(QualityVerdict {
        supported: checks.iter().all(|c| c.supported),
        checks,
        evidence,
    })
}

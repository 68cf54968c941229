//! Answer generation: plain distillation and the recursive evidence pipeline.

use serde::{Deserialize, Serialize};

use super::context::{AssembledContext, ContextPage};
use super::parse::parse_extraction;
use super::{ModelHandle, SftError};
use crate::cpt::{fit_resolution, TokenBudget};
use crate::example::{estimate_text_tokens, ContentItem, Message};
use crate::genclient::{complete_batch, complete_text, ChatRequest};
use crate::templates::Templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    VisualPages,
    TextEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageEvidence {
    pub page_id: String,
    /// Position in the presented context.
    pub position: usize,
    pub evidence: String,
    pub relevance: f64,
    /// The extraction reply could not be parsed.
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub pages: Vec<PageEvidence>,
    /// Positions sorted by relevance descending, ties by position.
    pub ranked: Vec<usize>,
    /// Prefix of `ranked`.
    pub selected: Vec<usize>,
    pub mode: AnswerMode,
    pub final_answer: String,
    pub teacher_model: String,
}

fn non_empty(text: String, what: impl FnOnce() -> String) -> Result<String, SftError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        Err(SftError::EmptyCompletion(what()))
    } else {
        Ok(trimmed.to_string())
    }
}

fn images_then_question(pages: &[&ContextPage], question: &str) -> Vec<Message> {
    let mut content: Vec<ContentItem> = pages.iter().map(|p| ContentItem::image(&p.image_ref)).collect();
    content.push(ContentItem::text(question));
    vec![Message::user(content)]
}

/// Full context plus the bare question, no extra instruction.
pub fn answer_plain(
    context: &AssembledContext,
    question: &str,
    teacher: &ModelHandle,
    budget: &TokenBudget,
) -> Result<String, SftError> {
    fit_resolution(context.len(), estimate_text_tokens(question), budget)?;
    let pages: Vec<&ContextPage> = context.pages.iter().collect();
    let request = ChatRequest::new(
        teacher.model,
        format!("answer_plain:{}", context.key()),
        images_then_question(&pages, question),
    );
    let text = complete_text(teacher.client, &request)?;
    non_empty(text, || format!("answer_plain:{}", context.key()))
}

/// Answer from a subset of pages, presented in the given order.
pub fn answer_from_pages(pages: &[&ContextPage], question: &str, handle: &ModelHandle, tag: &str) -> Result<String, SftError> {
    if pages.is_empty() {
        return Err(SftError::Precondition("answer needs at least one page".into()));
    }
    let request = ChatRequest::new(handle.model, tag, images_then_question(pages, question));
    let text = complete_text(handle.client, &request)?;
    non_empty(text, || tag.to_string())
}

/// Stable ranking by relevance descending, ties by position ascending.
pub fn rank_pages(relevances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevances.len()).collect();
    order.sort_by(|&a, &b| relevances[b].total_cmp(&relevances[a]));
    order
}

pub(crate) fn extract_evidence(
    context: &AssembledContext,
    question: &str,
    extractor: &ModelHandle,
    templates: &Templates,
    template: &str,
    vars: &[(&str, &str)],
) -> Result<Vec<PageEvidence>, SftError> {
    let mut all_vars = vec![("question", question)];
    all_vars.extend_from_slice(vars);
    let prompt = templates.render(template, &all_vars);
    let requests: Vec<_> = context
        .pages
        .iter()
        .map(|p| {
            ChatRequest::new(
                extractor.model,
                format!("{template}:{}", p.page_id),
                vec![Message::user(vec![ContentItem::image(&p.image_ref), ContentItem::text(prompt.clone())])],
            )
        })
        .collect();
    complete_batch(extractor.client, &requests, extractor.max_in_flight)
        .into_iter()
        .zip(&context.pages)
        .enumerate()
        .map(|(position, (result, page))| {
            let text = result.into_text()?;
            let (evidence, relevance, degraded) = match parse_extraction(&text) {
                Some((e, r)) => (e, r, false),
                None => (String::new(), 0.0, true),
            };
            Ok(PageEvidence {
                page_id: page.page_id.clone(),
                position,
                evidence,
                relevance,
                degraded,
            })
        })
        .collect()
}

/// Extract evidence page by page, rank, and answer from the top `k`.
pub fn answer_recursive(
    context: &AssembledContext,
    question: &str,
    extractor: &ModelHandle,
    answerer: &ModelHandle,
    templates: &Templates,
    k: usize,
    mode: AnswerMode,
) -> Result<AnswerTrace, SftError> {
    if k == 0 {
        return Err(SftError::Precondition("k must be at least 1".into()));
    }
    if context.is_empty() {
        return Err(SftError::Precondition("empty context".into()));
    }
    let pages = extract_evidence(context, question, extractor, templates, "extract", &[])?;
    let relevances: Vec<f64> = pages.iter().map(|p| p.relevance).collect();
    let ranked = rank_pages(&relevances);
    let selected: Vec<usize> = ranked.iter().copied().take(k).collect();
    let tag = format!("answer_recursive:{}", context.key());
    let final_answer = match mode {
        AnswerMode::VisualPages => {
            let chosen: Vec<&ContextPage> = selected.iter().map(|&i| &context.pages[i]).collect();
            answer_from_pages(&chosen, question, answerer, &tag)?
        }
        AnswerMode::TextEvidence => {
            let evidence = selected
                .iter()
                .map(|&i| format!("[{}] {}", pages[i].page_id, pages[i].evidence))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = templates.render("answer_from_evidence", &[("evidence", &evidence), ("question", question)]);
            let request = ChatRequest::new(answerer.model, tag.clone(), vec![Message::user_text(prompt)]);
            non_empty(complete_text(answerer.client, &request)?, || tag.clone())?
        }
    };
    Ok(AnswerTrace {
        pages,
        ranked,
        selected,
        mode,
        final_answer,
        teacher_model: answerer.model.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::document;
    use crate::example::Origin;
    use crate::genclient::{FnClient, MockClient, MockRule};
    use crate::sft::context::ContextStrategy;
    use proptest::prelude::*;

    fn context(pages: usize) -> AssembledContext {
        let doc = document("d", pages);
        AssembledContext {
            strategy: ContextStrategy::AdjacentRange,
            pages: doc.pages.iter().map(|p| ContextPage::from_page(p, Origin::Filler)).collect(),
        }
    }

    fn planted(relevances: &'static [&'static str]) -> MockClient {
        let mut rules: Vec<MockRule> = relevances
            .iter()
            .enumerate()
            .map(|(i, r)| MockRule::tag(format!("extract:d-p{i}"), format!("EVIDENCE: fact {i}\nRELEVANCE: {r}")))
            .collect();
        rules.push(MockRule::fallback("final"));
        MockClient::new(rules)
    }

    #[test]
    fn plain_passthrough_without_instruction() {
        let client = FnClient::new(|r: &ChatRequest| {
            assert_eq!(r.messages.len(), 1);
            assert_eq!(r.image_refs().len(), 3);
            assert_eq!(r.all_text(), "How much?");
            Ok("42".into())
        });
        let budget = TokenBudget::sft(131072, 28);
        let answer = answer_plain(&context(3), "How much?", &ModelHandle::new(&client, "t"), &budget).unwrap();
        assert_eq!(answer, "42");
    }

    #[test]
    fn plain_rejects_oversized_context() {
        let mock = MockClient::new(vec![MockRule::fallback("42")]);
        let budget = TokenBudget::sft(4096, 28);
        assert!(matches!(
            answer_plain(&context(20), "q", &ModelHandle::new(&mock, "t"), &budget),
            Err(SftError::Budget(_))
        ));
    }

    #[test]
    fn planted_relevances_select_top_two() {
        let mock = planted(&["0.2", "9.0", "5.0", "1.0"]);
        let h = ModelHandle::new(&mock, "m");
        let trace = answer_recursive(&context(4), "q", &h, &h, &Templates::default(), 2, AnswerMode::VisualPages).unwrap();
        assert_eq!(trace.ranked, [1, 2, 3, 0]);
        assert_eq!(trace.selected, [1, 2]);
        assert_eq!(trace.final_answer, "final");
    }

    #[test]
    fn ties_keep_document_order() {
        let mock = planted(&["3", "3", "3", "3"]);
        let h = ModelHandle::new(&mock, "m");
        let trace = answer_recursive(&context(4), "q", &h, &h, &Templates::default(), 3, AnswerMode::VisualPages).unwrap();
        assert_eq!(trace.selected, [0, 1, 2]);
    }

    #[test]
    fn text_evidence_mode_sends_no_images() {
        let extractor = planted(&["1", "8"]);
        let answerer = FnClient::new(|r: &ChatRequest| {
            assert!(r.image_refs().is_empty());
            assert!(r.all_text().contains("fact 1"));
            Ok("done".into())
        });
        let trace = answer_recursive(
            &context(2),
            "q",
            &ModelHandle::new(&extractor, "x"),
            &ModelHandle::new(&answerer, "a"),
            &Templates::default(),
            1,
            AnswerMode::TextEvidence,
        )
        .unwrap();
        assert_eq!(trace.teacher_model, "a");
    }

    #[test]
    fn unparseable_extraction_degrades_page() {
        let mock = MockClient::new(vec![
            MockRule::tag("extract:d-p0", "no idea"),
            MockRule::substring("RELEVANCE", "EVIDENCE: x\nRELEVANCE: 4"),
            MockRule::fallback("final"),
        ]);
        let h = ModelHandle::new(&mock, "m");
        let trace = answer_recursive(&context(2), "q", &h, &h, &Templates::default(), 1, AnswerMode::VisualPages).unwrap();
        assert!(trace.pages[0].degraded);
        assert_eq!(trace.pages[0].relevance, 0.0);
        assert_eq!(trace.selected, [1]);
    }

    #[test]
    fn extraction_sees_question_verbatim() {
        let client = FnClient::new(|r: &ChatRequest| {
            if r.request_tag.starts_with("extract:") {
                assert!(r.all_text().contains("What is the exact total?"));
                Ok("RELEVANCE: 1".into())
            } else {
                Ok("a".into())
            }
        });
        let h = ModelHandle::new(&client, "m");
        answer_recursive(&context(2), "What is the exact total?", &h, &h, &Templates::default(), 1, AnswerMode::VisualPages).unwrap();
    }

    #[test]
    fn empty_final_answer_is_error() {
        let mock = MockClient::new(vec![MockRule::substring("RELEVANCE", "RELEVANCE: 1"), MockRule::fallback("  ")]);
        let h = ModelHandle::new(&mock, "m");
        assert!(matches!(
            answer_recursive(&context(2), "q", &h, &h, &Templates::default(), 1, AnswerMode::VisualPages),
            Err(SftError::EmptyCompletion(_))
        ));
    }

    proptest! {
        #[test]
        fn ranking_matches_stable_sort_oracle(rel in proptest::collection::vec(0u8..=10, 1..20), k in 1usize..25) {
            let rel: Vec<f64> = rel.into_iter().map(f64::from).collect();
            let mut oracle: Vec<(usize, f64)> = rel.iter().copied().enumerate().collect();
            // insertion sort: stable by construction
            for i in 1..oracle.len() {
                let mut j = i;
                while j > 0 && oracle[j - 1].1 < oracle[j].1 {
                    oracle.swap(j - 1, j);
                    j -= 1;
                }
            }
            let expected: Vec<usize> = oracle.iter().map(|p| p.0).take(k).collect();
            let got: Vec<usize> = rank_pages(&rel).into_iter().take(k).collect();
            prop_assert_eq!(got, expected);
        }
    }
}

//! Question generation and the multi-page answerability filter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::context::AssembledContext;
use super::parse::{parse_numbered_lines, parse_verdict, Verdict};
use super::{ModelHandle, SftError};
use crate::corpus::Page;
use crate::example::{ContentItem, Message};
use crate::genclient::{complete_batch, complete_text, ChatRequest, GenerationResult};
use crate::templates::{Templates, DEFAULT_ARCHETYPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionPipeline {
    Magpie,
    SinglePage,
    MultiPage,
    Unanswerable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub pipeline: QuestionPipeline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetype: Option<String>,
    pub source_page_ids: Vec<String>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionConfig {
    /// Upper bound of the uniform question count per single-page request.
    #[serde(default = "default_max_questions")]
    pub max_questions: usize,
    #[serde(default = "default_archetypes")]
    pub archetypes: Vec<String>,
}

fn default_max_questions() -> usize {
    5
}

fn default_archetypes() -> Vec<String> {
    DEFAULT_ARCHETYPES.iter().map(|s| s.to_string()).collect()
}

impl Default for QuestionConfig {
    fn default() -> Self {
        Self {
            max_questions: default_max_questions(),
            archetypes: default_archetypes(),
        }
    }
}

fn page_request(handle: &ModelHandle, tag: String, page: &Page, prompt: Option<String>) -> ChatRequest {
    let mut content = vec![ContentItem::image(&page.image_ref)];
    content.extend(prompt.map(ContentItem::text));
    ChatRequest::new(handle.model, tag, vec![Message::user(content)])
}

fn magpie_from_result(page: &Page, result: GenerationResult) -> Result<Question, SftError> {
    let text = result.into_text()?.trim().to_string();
    if text.is_empty() {
        return Err(SftError::EmptyCompletion(format!("magpie:{}", page.page_id)));
    }
    Ok(Question {
        text,
        pipeline: QuestionPipeline::Magpie,
        archetype: None,
        source_page_ids: vec![page.page_id.clone()],
        kept: true,
    })
}

/// Magpie baseline: the page alone, no instruction; the completion is the question.
pub fn magpie_question(page: &Page, handle: &ModelHandle) -> Result<Question, SftError> {
    let request = page_request(handle, format!("magpie:{}", page.page_id), page, None);
    request.validate()?;
    magpie_from_result(page, handle.client.complete(&request)?)
}

/// Magpie over several pages, results in page order.
pub fn magpie_questions(pages: &[&Page], handle: &ModelHandle) -> Vec<Result<Question, SftError>> {
    let requests: Vec<_> = pages
        .iter()
        .map(|p| page_request(handle, format!("magpie:{}", p.page_id), p, None))
        .collect();
    complete_batch(handle.client, &requests, handle.max_in_flight)
        .into_iter()
        .zip(pages)
        .map(|(result, page)| magpie_from_result(page, result))
        .collect()
}

/// Ask for a random number of archetype-guided questions and keep one at random.
pub fn generate_sp_questions(
    page: &Page,
    handle: &ModelHandle,
    templates: &Templates,
    config: &QuestionConfig,
    seed: u64,
) -> Result<Question, SftError> {
    if config.max_questions == 0 || config.archetypes.is_empty() {
        return Err(SftError::Precondition(
            "question config needs max_questions >= 1 and at least one archetype".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=config.max_questions);
    let archetype = &config.archetypes[rng.gen_range(0..config.archetypes.len())];
    let prompt = templates.render(
        "sp_questions",
        &[("count", &count.to_string()), ("archetype", archetype)],
    );
    let mut last = String::new();
    for attempt in 0..2 {
        let request = page_request(
            handle,
            format!("sp_questions:{}:{attempt}", page.page_id),
            page,
            Some(prompt.clone()),
        );
        last = complete_text(handle.client, &request)?;
        let mut questions = parse_numbered_lines(&last);
        if questions.len() >= count {
            questions.truncate(count);
            let pick = rng.gen_range(0..count);
            return Ok(Question {
                text: questions.swap_remove(pick),
                pipeline: QuestionPipeline::SinglePage,
                archetype: Some(archetype.clone()),
                source_page_ids: vec![page.page_id.clone()],
                kept: true,
            });
        }
    }
    Err(SftError::Unparseable {
        what: format!("{count} questions for {}", page.page_id),
        output: last,
    })
}

/// Candidate multi-page questions over a context; all start unkept.
pub fn generate_mp_questions(
    context: &AssembledContext,
    handle: &ModelHandle,
    templates: &Templates,
) -> Result<Vec<Question>, SftError> {
    if context.pages.len() < 2 {
        return Err(SftError::Precondition(format!(
            "multi-page questions need at least 2 pages, got {}",
            context.pages.len()
        )));
    }
    let mut content = context.image_items();
    content.push(ContentItem::text(templates.get("mp_questions")));
    let request = ChatRequest::new(
        handle.model,
        format!("mp_questions:{}", context.key()),
        vec![Message::user(content)],
    );
    let text = complete_text(handle.client, &request)?;
    let questions = parse_numbered_lines(&text);
    if questions.is_empty() {
        return Err(SftError::Unparseable {
            what: "multi-page questions".into(),
            output: text,
        });
    }
    let sources: Vec<String> = context.pages.iter().map(|p| p.page_id.clone()).collect();
    Ok(questions
        .into_iter()
        .map(|text| Question {
            text,
            pipeline: QuestionPipeline::MultiPage,
            archetype: None,
            source_page_ids: sources.clone(),
            kept: false,
        })
        .collect())
}

/// A trick question, excluded from default compositions.
pub fn generate_unanswerable(page: &Page, handle: &ModelHandle, templates: &Templates) -> Result<Question, SftError> {
    let request = page_request(
        handle,
        format!("unanswerable:{}", page.page_id),
        page,
        Some(templates.get("unanswerable").to_string()),
    );
    let text = complete_text(handle.client, &request)?.trim().to_string();
    if text.is_empty() {
        return Err(SftError::EmptyCompletion(format!("unanswerable:{}", page.page_id)));
    }
    Ok(Question {
        text,
        pipeline: QuestionPipeline::Unanswerable,
        archetype: None,
        source_page_ids: vec![page.page_id.clone()],
        kept: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageVerdict {
    pub page_id: String,
    pub answer: String,
    pub verdict: Verdict,
}

impl PageVerdict {
    /// Unparseable verdicts count as answered, rejecting the question.
    pub fn answered(&self) -> bool {
        self.verdict != Verdict::No
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipageFilter {
    pub keep: bool,
    pub verdicts: Vec<PageVerdict>,
}

/// Keep a question only if no single page lets the answer model fully and
/// correctly answer it, as judged per page.
pub fn filter_multipage(
    question: &Question,
    context: &AssembledContext,
    answerer: &ModelHandle,
    judge: &ModelHandle,
    templates: &Templates,
) -> Result<MultipageFilter, SftError> {
    if context.pages.len() < 2 {
        return Err(SftError::Precondition("multi-page filter needs at least 2 pages".into()));
    }
    let answer_requests: Vec<_> = context
        .pages
        .iter()
        .map(|p| {
            ChatRequest::new(
                answerer.model,
                format!("mp_answer:{}", p.page_id),
                vec![Message::user(vec![
                    ContentItem::image(&p.image_ref),
                    ContentItem::text(templates.render("single_page_answer", &[("question", &question.text)])),
                ])],
            )
        })
        .collect();
    let answers = complete_batch(answerer.client, &answer_requests, answerer.max_in_flight)
        .into_iter()
        .map(|r| r.into_text())
        .collect::<Result<Vec<_>, _>>()?;
    let judge_requests: Vec<_> = context
        .pages
        .iter()
        .zip(&answers)
        .map(|(p, answer)| {
            ChatRequest::new(
                judge.model,
                format!("mp_judge:{}", p.page_id),
                vec![Message::user(vec![
                    ContentItem::image(&p.image_ref),
                    ContentItem::text(
                        templates.render("judge", &[("question", &question.text), ("answer", answer)]),
                    ),
                ])],
            )
        })
        .collect();
    let verdicts: Vec<PageVerdict> = complete_batch(judge.client, &judge_requests, judge.max_in_flight)
        .into_iter()
        .zip(context.pages.iter().zip(answers))
        .map(|(result, (page, answer))| PageVerdict {
            page_id: page.page_id.clone(),
            answer,
            verdict: result
                .into_text()
                .map(|t| parse_verdict(&t))
                .unwrap_or(Verdict::Unparseable),
        })
        .collect();
    Ok(MultipageFilter {
        keep: !verdicts.iter().any(PageVerdict::answered),
        verdicts,
    })
}

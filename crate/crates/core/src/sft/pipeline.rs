//! End-to-end SFT generation over the question pages of a corpus.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::answers::{answer_from_pages, answer_plain, answer_recursive, AnswerMode, AnswerTrace};
use super::context::{assemble_context, AssembledContext, ContextPage, ContextParams, ContextStrategy};
use super::multiturn::{simulate_multiturn, MultiTurn, SimulationModels, Turn};
use super::quality::{quality_check, QualityVerdict};
use super::questions::{
    filter_multipage, generate_mp_questions, generate_sp_questions, generate_unanswerable, magpie_question, Question,
    QuestionConfig,
};
use super::{ModelHandle, SftError};
use crate::corpus::Corpus;
use crate::cpt::{fit_resolution, page_tokens_at, TokenBudget, PATCH_QWEN, STAGE1_TOKENS};
use crate::example::{assistant_tokens, message_text_tokens, TrainingExample};
use crate::genclient::ChatClient;
use crate::templates::Templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionSource {
    Magpie,
    SinglePage,
    MultiPage,
    Unanswerable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMethod {
    /// Teacher sees the whole context.
    Plain,
    /// Per-page extraction, ranking and top-k answering.
    Recursive,
    /// Teacher sees only the question pages.
    QuestionPages,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelIds {
    pub teacher: String,
    #[serde(default)]
    pub extractor: Option<String>,
    #[serde(default)]
    pub questioner: Option<String>,
    #[serde(default)]
    pub judge: Option<String>,
    #[serde(default)]
    pub filter_answerer: Option<String>,
}

impl ModelIds {
    pub fn single(model: impl Into<String>) -> Self {
        Self {
            teacher: model.into(),
            extractor: None,
            questioner: None,
            judge: None,
            filter_answerer: None,
        }
    }

    fn or_teacher<'a>(&'a self, id: &'a Option<String>) -> &'a str {
        id.as_deref().unwrap_or(&self.teacher)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftPipelineConfig {
    pub name: String,
    pub question_source: QuestionSource,
    pub strategy: ContextStrategy,
    #[serde(default)]
    pub context: ContextParams,
    pub answer_method: AnswerMethod,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_mode")]
    pub mode: AnswerMode,
    #[serde(default)]
    pub quality_filter: bool,
    #[serde(default = "default_k")]
    pub quality_top_k: usize,
    /// Simulated follow-up turns after the first answer; recursive answers only.
    #[serde(default)]
    pub follow_ups: usize,
    pub models: ModelIds,
    #[serde(default)]
    pub questions: QuestionConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget: TokenBudget,
    /// Unanswerable questions are dropped unless this is set.
    #[serde(default)]
    pub include_unanswerable: bool,
    #[serde(default)]
    pub max_examples: Option<usize>,
}

fn default_k() -> usize {
    4
}

fn default_mode() -> AnswerMode {
    AnswerMode::VisualPages
}

fn default_budget() -> TokenBudget {
    TokenBudget::sft(STAGE1_TOKENS, PATCH_QWEN)
}

impl SftPipelineConfig {
    pub fn new(
        name: impl Into<String>,
        question_source: QuestionSource,
        strategy: ContextStrategy,
        answer_method: AnswerMethod,
        models: ModelIds,
    ) -> Self {
        Self {
            name: name.into(),
            question_source,
            strategy,
            context: ContextParams::default(),
            answer_method,
            k: default_k(),
            mode: default_mode(),
            quality_filter: false,
            quality_top_k: default_k(),
            follow_ups: 0,
            models,
            questions: QuestionConfig::default(),
            seed: 0,
            budget: default_budget(),
            include_unanswerable: false,
            max_examples: None,
        }
    }

    pub fn validate(&self) -> Result<(), SftError> {
        self.budget.validate()?;
        if self.k == 0 || self.quality_top_k == 0 {
            return Err(SftError::Precondition("k and quality_top_k must be at least 1".into()));
        }
        if self.follow_ups > 0 && self.answer_method != AnswerMethod::Recursive {
            return Err(SftError::Precondition("follow-up turns require the recursive answer method".into()));
        }
        Ok(())
    }
}

/// One generated conversation with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub example: TrainingExample,
    pub question: Question,
    pub context: AssembledContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityVerdict>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub attempted: usize,
    pub emitted: usize,
    /// Drop counts keyed by reason.
    pub dropped: BTreeMap<String, usize>,
}

enum Outcome {
    Emit(Box<SftExample>),
    Drop(&'static str),
}

fn drop_reason(err: &SftError) -> &'static str {
    match err {
        SftError::Generation(_) => "generation_error",
        SftError::Corpus(_) => "corpus_error",
        SftError::Budget(_) => "does_not_fit",
        SftError::EmptyCompletion(_) => "empty_completion",
        SftError::Precondition(_) => "precondition",
        SftError::Insufficient(_) => "insufficient_context",
        SftError::Unparseable { .. } => "unparseable",
        SftError::NoAssertions => "no_assertions",
    }
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Per-page seed, stable under corpus growth.
pub fn page_seed(seed: u64, page_id: &str) -> u64 {
    seed ^ fnv1a(page_id)
}

struct Models<'a> {
    teacher: ModelHandle<'a>,
    extractor: ModelHandle<'a>,
    questioner: ModelHandle<'a>,
    judge: ModelHandle<'a>,
    filter_answerer: ModelHandle<'a>,
}

fn run_page(
    corpus: &Corpus,
    config: &SftPipelineConfig,
    models: &Models,
    templates: &Templates,
    page_id: &str,
) -> Result<Outcome, SftError> {
    let seed = page_seed(config.seed, page_id);
    let page = corpus.page(page_id)?;
    let context = assemble_context(config.strategy, corpus, page_id, &config.context, seed)?;
    let question = match config.question_source {
        QuestionSource::Magpie => magpie_question(page, &models.questioner)?,
        QuestionSource::SinglePage => generate_sp_questions(page, &models.questioner, templates, &config.questions, seed)?,
        QuestionSource::Unanswerable => {
            if !config.include_unanswerable {
                return Ok(Outcome::Drop("unanswerable_excluded"));
            }
            generate_unanswerable(page, &models.questioner, templates)?
        }
        QuestionSource::MultiPage => {
            let mut kept = None;
            for mut candidate in generate_mp_questions(&context, &models.questioner, templates)? {
                let filter = filter_multipage(&candidate, &context, &models.filter_answerer, &models.judge, templates)?;
                if filter.keep {
                    candidate.kept = true;
                    kept = Some(candidate);
                    break;
                }
            }
            match kept {
                Some(q) => q,
                None => return Ok(Outcome::Drop("single_page_answerable")),
            }
        }
    };

    let tag = format!("answer_question_pages:{}", context.key());
    let conversation = match config.answer_method {
        AnswerMethod::Plain => single(&context, &question, answer_plain(&context, &question.text, &models.teacher, &config.budget)?, None),
        AnswerMethod::QuestionPages => {
            let pages: Vec<&ContextPage> = context.question_pages().collect();
            single(&context, &question, answer_from_pages(&pages, &question.text, &models.teacher, &tag)?, None)
        }
        AnswerMethod::Recursive if config.follow_ups > 0 => {
            let sim = SimulationModels {
                extractor: models.extractor,
                answerer: models.teacher,
                questioner: models.questioner,
            };
            simulate_multiturn(
                &context,
                &question.text,
                &sim,
                templates,
                config.k,
                config.mode,
                Some(config.follow_ups + 1),
                seed,
            )?
        }
        AnswerMethod::Recursive => {
            let trace = answer_recursive(&context, &question.text, &models.extractor, &models.teacher, templates, config.k, config.mode)?;
            single(&context, &question, trace.final_answer.clone(), Some(trace))
        }
    };

    let quality = if config.quality_filter {
        let turn = &conversation.turns[0];
        let verdict = quality_check(
            &turn.question,
            &turn.answer,
            &context,
            &models.extractor,
            &models.judge,
            templates,
            config.quality_top_k,
        )?;
        if !verdict.supported {
            return Ok(Outcome::Drop("quality_unsupported"));
        }
        Some(verdict)
    } else {
        None
    };

    let messages = conversation.to_messages();
    let text_tokens = message_text_tokens(&messages);
    let side = fit_resolution(context.len(), text_tokens, &config.budget)?;
    let traces: Vec<&AnswerTrace> = conversation.turns.iter().filter_map(|t| t.trace.as_ref()).collect();
    let example = TrainingExample {
        example_id: format!("{}:{page_id}", config.name),
        pipeline: config.name.clone(),
        task_kind: None,
        assistant_tokens: assistant_tokens(&messages),
        token_estimate: page_tokens_at(context.len(), side, config.budget.patch_size) + text_tokens,
        page_refs: conversation.pages.iter().map(|p| p.image_ref.clone()).collect(),
        origin_marks: conversation.pages.iter().map(|p| p.origin).collect(),
        page_count: conversation.pages.len(),
        messages,
        stage: None,
        trace: Some(serde_json::json!({
            "question_pipeline": question.pipeline,
            "strategy": context.strategy,
            "side_px": side,
            "answers": traces,
        })),
    };
    Ok(Outcome::Emit(Box::new(SftExample {
        example,
        question,
        context,
        quality,
    })))
}

fn single(context: &AssembledContext, question: &Question, answer: String, trace: Option<AnswerTrace>) -> MultiTurn {
    MultiTurn {
        pages: context.pages.clone(),
        turns: vec![Turn {
            trace,
            ..Turn::new(question.text.clone(), answer)
        }],
    }
}

/// Generate one example per question page, in sorted page-id order.
///
/// Failures on individual pages are counted in the stats by reason rather
/// than aborting the run.
pub fn run_pipeline(
    corpus: &Corpus,
    config: &SftPipelineConfig,
    client: &dyn ChatClient,
    templates: &Templates,
    max_in_flight: usize,
) -> Result<(Vec<SftExample>, PipelineStats), SftError> {
    config.validate()?;
    fn handle<'a>(client: &'a dyn ChatClient, id: &'a str, n: usize) -> ModelHandle<'a> {
        ModelHandle::new(client, id).with_max_in_flight(n)
    }
    let ids = &config.models;
    let models = Models {
        teacher: handle(client, &ids.teacher, max_in_flight),
        extractor: handle(client, ids.or_teacher(&ids.extractor), max_in_flight),
        questioner: handle(client, ids.or_teacher(&ids.questioner), max_in_flight),
        judge: handle(client, ids.or_teacher(&ids.judge), max_in_flight),
        filter_answerer: handle(client, ids.or_teacher(&ids.filter_answerer), max_in_flight),
    };
    let mut pages: Vec<String> = corpus.filter_question_pages().into_iter().collect();
    if let Some(limit) = config.max_examples {
        pages.truncate(limit);
    }
    let outcomes: Vec<(String, Result<Outcome, SftError>)> = pages
        .par_iter()
        .map(|id| (id.clone(), run_page(corpus, config, &models, templates, id)))
        .collect();

    let mut stats = PipelineStats {
        attempted: outcomes.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    for (page_id, outcome) in outcomes {
        let reason = match outcome {
            Ok(Outcome::Emit(example)) => {
                debug_assert!(example.context.question_pages().all(|q| example.context.pages.contains(q)));
                examples.push(*example);
                continue;
            }
            Ok(Outcome::Drop(reason)) => reason,
            Err(err) => {
                tracing::debug!(page_id, error = %err, "page dropped");
                drop_reason(&err)
            }
        };
        *stats.dropped.entry(reason.to_string()).or_default() += 1;
    }
    stats.emitted = examples.len();
    Ok((examples, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::{Origin, Role};
    use crate::genclient::{MockClient, MockRule};
    use crate::sft::testutil::corpus_with_neighbors;

    fn mock() -> MockClient {
        MockClient::new(vec![
            MockRule::tag("magpie:doc0-p0", ""),
            MockRule::substring("RELEVANCE: <number>", "EVIDENCE: something\nRELEVANCE: 6"),
            MockRule::substring("combining evidence", "1. Compare?\n2. Sum?"),
            MockRule::substring("Write ", "1. a?\n2. b?\n3. c?\n4. d?\n5. e?"),
            MockRule::substring("Proposed answer", "no"),
            MockRule::fallback("The answer is 7."),
        ])
    }

    fn config(source: QuestionSource, strategy: ContextStrategy, method: AnswerMethod) -> SftPipelineConfig {
        let mut c = SftPipelineConfig::new("t", source, strategy, method, ModelIds::single("m"));
        c.max_examples = Some(12);
        c
    }

    #[test]
    fn recursive_pipeline_emits_examples_and_counts_drops() {
        let corpus = corpus_with_neighbors();
        let cfg = config(QuestionSource::Magpie, ContextStrategy::AdjacentShort, AnswerMethod::Recursive);
        let (examples, stats) = run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 4).unwrap();
        assert_eq!(stats.attempted, 12);
        assert_eq!(stats.emitted, 11);
        assert_eq!(stats.dropped["empty_completion"], 1);
        for ex in &examples {
            let t = &ex.example;
            assert!(t.origin_marks.contains(&Origin::Question));
            assert_eq!(t.page_refs.len(), t.page_count);
            assert_eq!(t.messages.last().unwrap().role, Role::Assistant);
            assert!(t.trace.is_some());
        }
    }

    #[test]
    fn deterministic_across_runs_and_thread_counts() {
        let corpus = corpus_with_neighbors();
        let cfg = config(QuestionSource::SinglePage, ContextStrategy::HnShort, AnswerMethod::Plain);
        let (a, _) = run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 1).unwrap();
        let (b, _) = run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 8).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn unanswerable_excluded_by_default() {
        let corpus = corpus_with_neighbors();
        let cfg = config(QuestionSource::Unanswerable, ContextStrategy::AdjacentShort, AnswerMethod::Plain);
        let (examples, stats) = run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 2).unwrap();
        assert!(examples.is_empty());
        assert_eq!(stats.dropped["unanswerable_excluded"], 12);
    }

    #[test]
    fn multipage_questions_keep_when_no_page_suffices() {
        let corpus = corpus_with_neighbors();
        let cfg = config(QuestionSource::MultiPage, ContextStrategy::AdjacentShort, AnswerMethod::Plain);
        let (examples, _) = run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 2).unwrap();
        assert_eq!(examples.len(), 12);
        assert!(examples.iter().all(|e| e.question.kept && e.question.text == "Compare?"));
    }

    #[test]
    fn distractor_answers_from_question_page_only() {
        let corpus = corpus_with_neighbors();
        let cfg = config(QuestionSource::Magpie, ContextStrategy::DistractorShort, AnswerMethod::QuestionPages);
        let (examples, _) = run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 2).unwrap();
        assert!(examples.iter().all(|e| (2..=5).contains(&e.example.page_count)));
    }

    #[test]
    fn follow_ups_produce_multi_turn() {
        let corpus = corpus_with_neighbors();
        let mut cfg = config(QuestionSource::Magpie, ContextStrategy::AdjacentShort, AnswerMethod::Recursive);
        cfg.follow_ups = 2;
        let (examples, _) = run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 2).unwrap();
        assert!(examples.iter().all(|e| e.example.messages.len() == 6));
        cfg.answer_method = AnswerMethod::Plain;
        assert!(run_pipeline(&corpus, &cfg, &mock(), &Templates::default(), 2).is_err());
    }

    #[test]
    fn quality_filter_drops_unsupported() {
        let corpus = corpus_with_neighbors();
        let mut cfg = config(QuestionSource::Magpie, ContextStrategy::AdjacentShort, AnswerMethod::Plain);
        cfg.quality_filter = true;
        let mock = MockClient::new(vec![
            MockRule::substring("atomic assertions", "1. x\n2. y"),
            MockRule::substring("supports or contradicts", "1: e\n2: NONE\nRELEVANCE: 4"),
            MockRule::substring("is supported", "1: yes\n2: no"),
            MockRule::fallback("The answer."),
        ]);
        let (examples, stats) = run_pipeline(&corpus, &cfg, &mock, &Templates::default(), 2).unwrap();
        assert!(examples.is_empty());
        assert_eq!(stats.dropped["quality_unsupported"], 12);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let json = r#"{"name":"x","question_source":"magpie","strategy":"adjacent_short","answer_method":"plain","models":{"teacher":"m"},"bogus":1}"#;
        assert!(serde_json::from_str::<SftPipelineConfig>(json).is_err());
    }
}

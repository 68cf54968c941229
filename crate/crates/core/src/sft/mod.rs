//! Supervised-finetuning data synthesis.
//!
//! Questions come from a single page (Magpie-style or archetype-prompted)
//! or from a multi-page context filtered so no single page answers them.
//! Contexts are assembled from adjacent pages, whole documents, or hard
//! negatives. Answers come from plain distillation over the full context or
//! from the recursive pipeline, which extracts per-page evidence, ranks the
//! pages, and answers from the top-k pages or their evidence.

mod answers;
mod context;
mod multiturn;
mod parse;
mod pipeline;
mod quality;
mod questions;

use crate::corpus::CorpusError;
use crate::cpt::CptError;
use crate::genclient::{ChatClient, GenError};

pub(crate) use answers::extract_evidence;
pub use answers::{answer_from_pages, answer_plain, answer_recursive, rank_pages, AnswerMode, AnswerTrace, PageEvidence};
pub use context::{assemble_context, AssembledContext, ContextPage, ContextParams, ContextStrategy, SHORT_PAGES};
pub use multiturn::{concat_multiturn, simulate_multiturn, FollowUpKind, MultiTurn, SimulationModels, Turn};
pub use parse::{parse_extraction, parse_numbered_lines, parse_verdict, Verdict};
pub use pipeline::{page_seed, run_pipeline, AnswerMethod, ModelIds, PipelineStats, QuestionSource, SftExample, SftPipelineConfig};
pub use quality::{quality_check, AssertionCheck, EvidenceSnippet, QualityVerdict};
pub use questions::{
    filter_multipage, generate_mp_questions, generate_sp_questions, generate_unanswerable, magpie_question,
    magpie_questions, MultipageFilter, PageVerdict, Question, QuestionConfig, QuestionPipeline,
};

#[derive(Debug, thiserror::Error)]
pub enum SftError {
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Budget(#[from] CptError),
    #[error("empty completion for {0}")]
    EmptyCompletion(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("insufficient material: {0}")]
    Insufficient(String),
    #[error("unparseable output for {what}: {output:?}")]
    Unparseable { what: String, output: String },
    #[error("answer decomposed into zero assertions")]
    NoAssertions,
}

/// A model id bound to the client that serves it.
#[derive(Clone, Copy)]
pub struct ModelHandle<'a> {
    pub client: &'a dyn ChatClient,
    pub model: &'a str,
    pub max_in_flight: usize,
}

impl<'a> ModelHandle<'a> {
    pub fn new(client: &'a dyn ChatClient, model: &'a str) -> Self {
        Self {
            client,
            model,
            max_in_flight: 4,
        }
    }

    pub fn with_max_in_flight(mut self, max_in_flight: usize) -> Self {
        self.max_in_flight = max_in_flight.max(1);
        self
    }
}

impl std::fmt::Debug for ModelHandle<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("model", &self.model)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

//! Continued-pretraining task construction: fill-in-the-middle, unshuffle,
//! key/position retrieval, and counting.

mod budget;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Page};
use crate::example::{
    assistant_tokens, estimate_text_tokens, ContentItem, Message, Origin, TaskKind, TrainingExample,
};
use crate::genclient::{complete_batch, ChatClient, ChatRequest};
use crate::templates::Templates;

pub use budget::{
    estimate_image_tokens, fit_resolution, page_tokens_at, TokenBudget, PATCH_MISTRAL, PATCH_QWEN,
    STAGE1_TOKENS, STAGE2_TOKENS_MISTRAL, STAGE2_TOKENS_QWEN,
};

/// Anchor n-gram lengths for key retrieval.
pub const ANCHOR_WORDS: std::ops::RangeInclusive<usize> = 5..=8;

#[derive(Debug, thiserror::Error)]
pub enum CptError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("example does not fit: {page_count} pages + {text_tokens} text tokens exceed {budget} even at the minimum side")]
    DoesNotFit {
        page_count: usize,
        text_tokens: u64,
        budget: u64,
    },
    #[error("document {doc_id}: {message}")]
    Precondition { doc_id: String, message: String },
    #[error("page {page_id} has no parsed text")]
    MissingText { page_id: String },
    #[error("document {0}: no page has enough parsed text")]
    NoText(String),
    #[error("counting labeler for page {page_id}: {message}")]
    Labeler { page_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptExample {
    pub example_id: String,
    pub task_kind: TaskKind,
    pub doc_id: String,
    /// Page images in presentation order, with any interleaved text items.
    pub context: Vec<ContentItem>,
    pub instruction: String,
    pub target: String,
    /// Removed page (FIM), presented order (unshuffle), or queried page.
    pub page_indices: Vec<usize>,
    pub page_refs: Vec<String>,
    pub side_px: u32,
    pub token_estimate: u64,
    pub seed: u64,
}

impl CptExample {
    pub fn page_count(&self) -> usize {
        self.context.iter().filter(|c| c.is_image()).count()
    }

    pub fn into_training_example(self) -> TrainingExample {
        let mut user = self.context;
        user.push(ContentItem::text(self.instruction));
        let messages = vec![Message::user(user), Message::assistant(self.target)];
        let page_count = self.page_refs.len();
        TrainingExample {
            assistant_tokens: assistant_tokens(&messages),
            example_id: self.example_id,
            pipeline: "cpt".into(),
            task_kind: Some(self.task_kind),
            messages,
            origin_marks: vec![Origin::Filler; page_count],
            page_refs: self.page_refs,
            page_count,
            token_estimate: self.token_estimate,
            stage: None,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Key,
    Position,
}

/// Builds CPT examples against one token budget and template set.
#[derive(Debug, Clone)]
pub struct CptBuilder {
    pub budget: TokenBudget,
    pub templates: Templates,
    /// Words in a key-retrieval answer span.
    pub answer_words: usize,
    /// Reshuffles attempted before forcing a swap when a shuffle is the identity.
    pub unshuffle_resamples: u32,
}

impl CptBuilder {
    pub fn new(budget: TokenBudget) -> Self {
        Self {
            budget,
            templates: Templates::default(),
            answer_words: 16,
            unshuffle_resamples: 8,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        example_id: String,
        task_kind: TaskKind,
        doc: &Document,
        context: Vec<ContentItem>,
        page_refs: Vec<String>,
        instruction: String,
        target: String,
        page_indices: Vec<usize>,
        seed: u64,
    ) -> Result<CptExample, CptError> {
        let text_tokens: u64 = context
            .iter()
            .filter_map(ContentItem::as_text)
            .map(estimate_text_tokens)
            .sum::<u64>()
            + estimate_text_tokens(&instruction)
            + estimate_text_tokens(&target);
        let pages = page_refs.len().max(1);
        let side = fit_resolution(pages, text_tokens, &self.budget)?;
        let token_estimate = page_tokens_at(pages, side, self.budget.patch_size) + text_tokens;
        Ok(CptExample {
            example_id,
            task_kind,
            doc_id: doc.doc_id.clone(),
            context,
            instruction,
            target,
            page_indices,
            page_refs,
            side_px: side,
            token_estimate,
            seed,
        })
    }

    /// Remove one page and ask for its text.
    pub fn fim(&self, doc: &Document, removed_index: usize) -> Result<CptExample, CptError> {
        if doc.pages.len() < 2 {
            return Err(precondition(doc, "fill-in-the-middle needs at least 2 pages"));
        }
        let removed = doc.page(removed_index).ok_or_else(|| {
            precondition(doc, &format!("page index {removed_index} out of range"))
        })?;
        let target = removed.text().ok_or_else(|| CptError::MissingText {
            page_id: removed.page_id.clone(),
        })?;
        let kept: Vec<&Page> = doc.pages.iter().filter(|p| p.index != removed_index).collect();
        let instruction = self.templates.render(
            "fim",
            &[
                ("missing", &(removed_index + 1).to_string()),
                ("total", &doc.pages.len().to_string()),
            ],
        );
        self.finish(
            format!("{}:fim:{removed_index}", doc.doc_id),
            TaskKind::Fim,
            doc,
            kept.iter().map(|p| ContentItem::image(&p.image_ref)).collect(),
            kept.iter().map(|p| p.page_id.clone()).collect(),
            instruction,
            target.to_string(),
            vec![removed_index],
            removed_index as u64,
        )
    }

    /// Present the pages in a seeded non-identity order labeled "Position i:".
    pub fn unshuffle(&self, doc: &Document, seed: u64) -> Result<CptExample, CptError> {
        let n = doc.pages.len();
        if n < 2 {
            return Err(precondition(doc, "unshuffle needs at least 2 pages"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity: Vec<usize> = (0..n).collect();
        let mut presented = identity.clone();
        let mut attempts = 0;
        loop {
            presented.shuffle(&mut rng);
            if presented != identity {
                break;
            }
            attempts += 1;
            if attempts > self.unshuffle_resamples {
                presented.swap(0, 1);
                break;
            }
        }
        let mut context = Vec::with_capacity(2 * n);
        for (pos, &original) in presented.iter().enumerate() {
            context.push(ContentItem::text(format!("Position {}:\n", pos + 1)));
            context.push(ContentItem::image(&doc.pages[original].image_ref));
        }
        let page_refs = presented.iter().map(|&i| doc.pages[i].page_id.clone()).collect();
        self.finish(
            format!("{}:unshuffle:{seed}", doc.doc_id),
            TaskKind::Unshuffle,
            doc,
            context,
            page_refs,
            self.templates.get("unshuffle").to_string(),
            unshuffle_target(&presented),
            presented,
            seed,
        )
    }

    pub fn retrieval(&self, doc: &Document, mode: RetrievalMode, seed: u64) -> Result<CptExample, CptError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (instruction, target, queried, kind) = match mode {
            RetrievalMode::Key => {
                let n = rng.gen_range(ANCHOR_WORDS);
                let needed = n + self.answer_words;
                let words: Vec<Vec<&str>> = doc
                    .pages
                    .iter()
                    .map(|p| p.text().map(|t| t.split_whitespace().collect()).unwrap_or_default())
                    .collect();
                let eligible: Vec<usize> = (0..words.len()).filter(|&i| words[i].len() >= needed).collect();
                let &page = eligible
                    .get(rng.gen_range(0..eligible.len().max(1)))
                    .ok_or_else(|| CptError::NoText(doc.doc_id.clone()))?;
                let page_words = &words[page];
                let starts: Vec<usize> = (0..=page_words.len() - needed).collect();
                // prefer anchors that occur once in the document so the answer is unambiguous
                let unique: Vec<usize> = starts
                    .iter()
                    .copied()
                    .filter(|&s| anchor_occurrences(&words, &page_words[s..s + n]) == 1)
                    .collect();
                let pool = if unique.is_empty() { &starts } else { &unique };
                let start = pool[rng.gen_range(0..pool.len())];
                let (key, answer) = key_retrieval_span(page_words, start, n, self.answer_words);
                let instruction = self.templates.render(
                    "retrieval_key",
                    &[("key", &key), ("count", &self.answer_words.to_string())],
                );
                (instruction, answer, page, TaskKind::RetrievalKey)
            }
            RetrievalMode::Position => {
                let paragraphs: Vec<(usize, Vec<String>)> = doc
                    .pages
                    .iter()
                    .filter_map(|p| p.text().map(|t| (p.index, split_paragraphs(t))))
                    .filter(|(_, paras)| !paras.is_empty())
                    .collect();
                if paragraphs.is_empty() {
                    return Err(CptError::NoText(doc.doc_id.clone()));
                }
                let (page, paras) = &paragraphs[rng.gen_range(0..paragraphs.len())];
                let k = rng.gen_range(0..paras.len());
                let instruction = self.templates.render(
                    "retrieval_position",
                    &[("page", &(page + 1).to_string()), ("paragraph", &(k + 1).to_string())],
                );
                (instruction, paras[k].clone(), *page, TaskKind::RetrievalPosition)
            }
        };
        self.finish(
            format!("{}:{}:{seed}", doc.doc_id, kind.as_str()),
            kind,
            doc,
            doc.pages.iter().map(|p| ContentItem::image(&p.image_ref)).collect(),
            doc.pages.iter().map(|p| p.page_id.clone()).collect(),
            instruction,
            target,
            vec![queried],
            seed,
        )
    }

    /// Chain-of-thought counting target from per-page counts.
    pub fn counting(&self, doc: &Document, per_page_counts: &[u64], label: &str) -> Result<CptExample, CptError> {
        if per_page_counts.len() != doc.pages.len() {
            return Err(precondition(
                doc,
                &format!(
                    "{} counts given for {} pages",
                    per_page_counts.len(),
                    doc.pages.len()
                ),
            ));
        }
        let instruction = self.templates.render("counting", &[("label", label)]);
        self.finish(
            format!("{}:counting:{label}", doc.doc_id),
            TaskKind::Counting,
            doc,
            doc.pages.iter().map(|p| ContentItem::image(&p.image_ref)).collect(),
            doc.pages.iter().map(|p| p.page_id.clone()).collect(),
            instruction,
            counting_target(per_page_counts),
            (0..doc.pages.len()).collect(),
            0,
        )
    }
}

/// Ask `client` to count `label` on each page individually.
pub fn label_page_counts<C: ChatClient + ?Sized>(
    client: &C,
    model: &str,
    templates: &Templates,
    doc: &Document,
    label: &str,
    max_in_flight: usize,
) -> Result<Vec<u64>, CptError> {
    let prompt = templates.render("counting_label", &[("label", label)]);
    let requests: Vec<ChatRequest> = doc
        .pages
        .iter()
        .map(|p| {
            ChatRequest::new(
                model,
                format!("count:{label}:{}", p.page_id),
                vec![Message::user(vec![
                    ContentItem::image(&p.image_ref),
                    ContentItem::text(prompt.clone()),
                ])],
            )
        })
        .collect();
    complete_batch(client, &requests, max_in_flight)
        .into_iter()
        .zip(&doc.pages)
        .map(|(result, page)| {
            let labeler = |message: String| CptError::Labeler {
                page_id: page.page_id.clone(),
                message,
            };
            let text = result.into_text().map_err(|e| labeler(e.to_string()))?;
            first_integer(&text).ok_or_else(|| labeler(format!("no count in {text:?}")))
        })
        .collect()
}

/// 1-based positions of the original pages, in reading order.
pub fn unshuffle_target(presented: &[usize]) -> String {
    let mut position_of = vec![0; presented.len()];
    for (pos, &original) in presented.iter().enumerate() {
        position_of[original] = pos + 1;
    }
    position_of
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Parse an unshuffle target back into 1-based positions.
pub fn parse_unshuffle_target(target: &str) -> Option<Vec<usize>> {
    target.split(',').map(|s| s.trim().parse().ok()).collect()
}

/// The anchor n-gram starting at `start` and the `answer_words` that follow it.
pub fn key_retrieval_span(words: &[&str], start: usize, n: usize, answer_words: usize) -> (String, String) {
    let key = words[start..start + n].join(" ");
    let answer = words[start + n..start + n + answer_words].join(" ");
    (key, answer)
}

fn anchor_occurrences(pages: &[Vec<&str>], anchor: &[&str]) -> usize {
    pages
        .iter()
        .map(|w| w.windows(anchor.len()).filter(|win| *win == anchor).count())
        .sum()
}

/// Paragraphs are separated by blank lines.
pub fn split_paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line.trim_end());
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
    out
}

pub fn counting_target(per_page_counts: &[u64]) -> String {
    let mut lines: Vec<String> = per_page_counts
        .iter()
        .enumerate()
        .map(|(i, c)| format!("Page {}: {c}", i + 1))
        .collect();
    lines.push(format!("Total: {}", per_page_counts.iter().sum::<u64>()));
    lines.join("\n")
}

/// Parse a counting target into (per-page counts, stated total).
pub fn parse_counting_target(target: &str) -> Option<(Vec<u64>, u64)> {
    let mut counts = Vec::new();
    let mut total = None;
    for line in target.lines() {
        if let Some(rest) = line.strip_prefix("Total: ") {
            total = Some(rest.trim().parse().ok()?);
        } else {
            let (_, count) = line.strip_prefix("Page ")?.split_once(": ")?;
            counts.push(count.trim().parse().ok()?);
        }
    }
    Some((counts, total?))
}

fn first_integer(text: &str) -> Option<u64> {
    text.split(|c: char| !c.is_ascii_digit())
        .find(|s| !s.is_empty())
        .and_then(|s| s.parse().ok())
}

fn precondition(doc: &Document, message: &str) -> CptError {
    CptError::Precondition {
        doc_id: doc.doc_id.clone(),
        message: message.to_string(),
    }
}

/// Sort examples into the canonical (doc_id, task_kind, seed) order.
pub fn canonical_order(examples: &mut [CptExample]) {
    examples.sort_by(|a, b| {
        (&a.doc_id, a.task_kind, a.seed, &a.example_id).cmp(&(&b.doc_id, b.task_kind, b.seed, &b.example_id))
    });
}

//! Multi-turn conversations, by concatenation or simulated follow-ups.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::answers::{answer_recursive, AnswerMode, AnswerTrace};
use super::context::{AssembledContext, ContextPage};
use super::{ModelHandle, SftError};
use crate::example::{ContentItem, Message, Origin};
use crate::genclient::{complete_text, ChatRequest};
use crate::templates::Templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowUpKind {
    Deeper,
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follow_up: Option<FollowUpKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<AnswerTrace>,
}

impl Turn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            follow_up: None,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTurn {
    /// Shared context, emitted once at the start of the conversation.
    pub pages: Vec<ContextPage>,
    pub turns: Vec<Turn>,
}

impl MultiTurn {
    pub fn to_messages(&self) -> Vec<Message> {
        let mut messages = Vec::with_capacity(self.turns.len() * 2);
        for (i, turn) in self.turns.iter().enumerate() {
            if i == 0 {
                let mut content: Vec<ContentItem> = self.pages.iter().map(|p| ContentItem::image(&p.image_ref)).collect();
                content.push(ContentItem::text(&turn.question));
                messages.push(Message::user(content));
            } else {
                messages.push(Message::user_text(&turn.question));
            }
            messages.push(Message::assistant(&turn.answer));
        }
        messages
    }
}

/// Merge single-turn examples into one conversation over the union of
/// their pages, in document order.
pub fn concat_multiturn(parts: &[(&AssembledContext, Turn)]) -> Result<MultiTurn, SftError> {
    if parts.is_empty() {
        return Err(SftError::Precondition("nothing to concatenate".into()));
    }
    let mut union: BTreeMap<(String, usize), ContextPage> = BTreeMap::new();
    for page in parts.iter().flat_map(|(ctx, _)| &ctx.pages) {
        union
            .entry((page.doc_id.clone(), page.index))
            .and_modify(|p| {
                if page.origin == Origin::Question {
                    p.origin = Origin::Question;
                }
            })
            .or_insert_with(|| ContextPage { neighbor_rank: None, ..page.clone() });
    }
    Ok(MultiTurn {
        pages: union.into_values().collect(),
        turns: parts.iter().map(|(_, t)| t.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SimulationModels<'a> {
    pub extractor: ModelHandle<'a>,
    pub answerer: ModelHandle<'a>,
    pub questioner: ModelHandle<'a>,
}

fn transcript(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("User: {}\nAssistant: {}", t.question, t.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Answer `question`, then ask and answer follow-ups until `turns` Q/A pairs
/// exist (uniform in 2..=4 when absent).
#[allow(clippy::too_many_arguments)]
pub fn simulate_multiturn(
    context: &AssembledContext,
    question: &str,
    models: &SimulationModels,
    templates: &Templates,
    k: usize,
    mode: AnswerMode,
    turns: Option<usize>,
    seed: u64,
) -> Result<MultiTurn, SftError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = match turns {
        Some(0) => return Err(SftError::Precondition("turn count must be positive".into())),
        Some(n) => n,
        None => rng.gen_range(2..=4),
    };
    let answer = |q: &str| answer_recursive(context, q, &models.extractor, &models.answerer, templates, k, mode);
    let first = answer(question)?;
    let mut history = vec![Turn {
        question: question.to_string(),
        answer: first.final_answer.clone(),
        follow_up: None,
        trace: Some(first),
    }];
    while history.len() < total {
        let kind = if rng.gen_bool(0.5) { FollowUpKind::Deeper } else { FollowUpKind::New };
        let template = match kind {
            FollowUpKind::Deeper => "followup_deeper",
            FollowUpKind::New => "followup_new",
        };
        let mut content = context.image_items();
        content.push(ContentItem::text(templates.render(template, &[("transcript", &transcript(&history))])));
        let request = ChatRequest::new(
            models.questioner.model,
            format!("{template}:{}:{}", context.key(), history.len()),
            vec![Message::user(content)],
        );
        let follow = complete_text(models.questioner.client, &request)?.trim().to_string();
        if follow.is_empty() {
            return Err(SftError::EmptyCompletion(request.request_tag));
        }
        let trace = answer(&follow)?;
        history.push(Turn {
            question: follow,
            answer: trace.final_answer.clone(),
            follow_up: Some(kind),
            trace: Some(trace),
        });
    }
    Ok(MultiTurn {
        pages: context.pages.clone(),
        turns: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::document;
    use crate::example::Role;
    use crate::genclient::{FnClient, MockClient, MockRule};
    use crate::sft::context::ContextStrategy;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn context(indices: &[usize]) -> AssembledContext {
        let doc = document("d", 10);
        AssembledContext {
            strategy: ContextStrategy::AdjacentRange,
            pages: indices
                .iter()
                .map(|&i| ContextPage::from_page(&doc.pages[i], if i == indices[0] { Origin::Question } else { Origin::Filler }))
                .collect(),
        }
    }

    #[test]
    fn concatenation_emits_shared_context_once() {
        let a = context(&[2, 3]);
        let b = context(&[3, 1]);
        let mt = concat_multiturn(&[(&a, Turn::new("q1", "a1")), (&b, Turn::new("q2", "a2"))]).unwrap();
        let idx: Vec<usize> = mt.pages.iter().map(|p| p.index).collect();
        assert_eq!(idx, [1, 2, 3]);
        let origins: Vec<Origin> = mt.pages.iter().map(|p| p.origin).collect();
        assert_eq!(origins, [Origin::Filler, Origin::Question, Origin::Question]);
        let messages = mt.to_messages();
        assert_eq!(messages.len(), 4);
        assert_eq!(messages[0].image_count(), 3);
        assert_eq!(messages[2].image_count(), 0);
        assert_eq!(messages[3].role, Role::Assistant);
        assert!(concat_multiturn(&[]).is_err());
    }

    #[test]
    fn simulated_follow_ups_in_order() {
        let extractor = MockClient::new(vec![MockRule::fallback("EVIDENCE: e\nRELEVANCE: 5")]);
        let n = AtomicUsize::new(0);
        let questioner = FnClient::new(|_: &ChatRequest| Ok(format!("follow {}", n.fetch_add(1, Ordering::SeqCst) + 1)));
        let answerer = FnClient::new(|r: &ChatRequest| {
            let q = r.all_text();
            Ok(format!("answer to {q}"))
        });
        let models = SimulationModels {
            extractor: ModelHandle::new(&extractor, "x"),
            answerer: ModelHandle::new(&answerer, "a"),
            questioner: ModelHandle::new(&questioner, "q"),
        };
        let ctx = context(&[0, 1, 2]);
        let mt = simulate_multiturn(&ctx, "start", &models, &Templates::default(), 2, AnswerMode::VisualPages, Some(3), 4).unwrap();
        let qs: Vec<&str> = mt.turns.iter().map(|t| t.question.as_str()).collect();
        assert_eq!(qs, ["start", "follow 1", "follow 2"]);
        assert_eq!(mt.turns[2].answer, "answer to follow 2");
        assert!(mt.turns[1].follow_up.is_some());
        assert_eq!(mt.to_messages().len(), 6);
    }

    #[test]
    fn turn_count_is_seeded() {
        let mock = MockClient::new(vec![MockRule::fallback("RELEVANCE: 1")]);
        let h = ModelHandle::new(&mock, "m");
        let models = SimulationModels { extractor: h, answerer: h, questioner: h };
        let ctx = context(&[0, 1]);
        let mut counts = std::collections::BTreeSet::new();
        for seed in 0..30 {
            let run = |s| {
                simulate_multiturn(&ctx, "q", &models, &Templates::default(), 1, AnswerMode::VisualPages, None, s)
                    .unwrap()
                    .turns
                    .len()
            };
            let a = run(seed);
            assert_eq!(a, run(seed));
            assert!((2..=4).contains(&a));
            counts.insert(a);
        }
        assert_eq!(counts.len(), 3);
    }
}

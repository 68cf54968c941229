//! Stage splitting, curriculum ordering, packing and page-index injection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpt::{STAGE1_TOKENS, STAGE2_TOKENS_MISTRAL, STAGE2_TOKENS_QWEN};
use crate::example::{ContentItem, Message, Stage, TrainingExample};

/// Largest page count admitted to the short stage.
pub const SHORT_MAX_PAGES: usize = 104;
/// Largest page count admitted at all.
pub const LONG_MAX_PAGES: usize = 336;
/// Tokens per pseudo-page for text-only examples.
pub const PSEUDO_PAGE_TOKENS: u64 = 1024;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("example {example_id} needs {tokens} tokens, budget is {budget}")]
    Oversize { example_id: String, tokens: u64, budget: u64 },
    #[error("example {0} has no task kind; the length-difficulty curriculum needs one")]
    MissingTaskKind(String),
    #[error("invalid schedule config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub max_pages: usize,
    pub pack_budget_tokens: u64,
}

impl StagePlan {
    pub fn short() -> Self {
        Self {
            stage: Stage::Short,
            max_pages: SHORT_MAX_PAGES,
            pack_budget_tokens: STAGE1_TOKENS,
        }
    }

    /// Long stage; `qwen` selects the smaller packing budget.
    pub fn long(qwen: bool) -> Self {
        Self {
            stage: Stage::Long,
            max_pages: LONG_MAX_PAGES,
            pack_budget_tokens: if qwen { STAGE2_TOKENS_QWEN } else { STAGE2_TOKENS_MISTRAL },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSplit {
    pub short: Vec<TrainingExample>,
    pub long: Vec<TrainingExample>,
    pub dropped: Vec<TrainingExample>,
}

/// Route examples by page count; the stage field is set on kept examples.
pub fn split_stages(examples: Vec<TrainingExample>) -> StageSplit {
    let mut split = StageSplit::default();
    for mut ex in examples {
        match ex.page_count {
            0..=SHORT_MAX_PAGES => {
                ex.stage = Some(Stage::Short);
                split.short.push(ex);
            }
            n if n <= LONG_MAX_PAGES => {
                ex.stage = Some(Stage::Long);
                split.long.push(ex);
            }
            n => {
                tracing::warn!(example_id = %ex.example_id, pages = n, "dropping example above the long-stage page limit");
                split.dropped.push(ex);
            }
        }
    }
    split
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curriculum {
    None,
    Length,
    LengthDifficulty,
}

impl std::str::FromStr for Curriculum {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Curriculum::None),
            "length" => Ok(Curriculum::Length),
            "length-difficulty" | "length_difficulty" => Ok(Curriculum::LengthDifficulty),
            other => Err(format!("unknown curriculum {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub kind: Curriculum,
    /// Fraction of examples relocated across tasks in the length-difficulty curriculum.
    #[serde(default = "default_mix")]
    pub mix_fraction: f64,
    #[serde(default = "default_bucket_width")]
    pub bucket_width: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mix() -> f64 {
    0.1
}

fn default_bucket_width() -> usize {
    16
}

impl CurriculumConfig {
    pub fn new(kind: Curriculum, seed: u64) -> Self {
        Self {
            kind,
            mix_fraction: default_mix(),
            bucket_width: default_bucket_width(),
            seed,
        }
    }
}

/// Page count, or `ceil(tokens / 1024)` for examples without pages.
pub fn effective_pages(example: &TrainingExample) -> u64 {
    if example.page_count > 0 {
        example.page_count as u64
    } else {
        example.token_estimate.div_ceil(PSEUDO_PAGE_TOKENS)
    }
}

fn bucketed(examples: Vec<TrainingExample>, width: usize, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
    let mut buckets: BTreeMap<u64, Vec<TrainingExample>> = BTreeMap::new();
    for ex in examples {
        buckets.entry(effective_pages(&ex) / width as u64).or_default().push(ex);
    }
    buckets
        .into_values()
        .flat_map(|mut bucket| {
            bucket.shuffle(rng);
            bucket
        })
        .collect()
}

pub fn order_curriculum(
    examples: Vec<TrainingExample>,
    config: &CurriculumConfig,
) -> Result<Vec<TrainingExample>, ScheduleError> {
    if config.bucket_width == 0 {
        return Err(ScheduleError::Config("bucket_width must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.mix_fraction) {
        return Err(ScheduleError::Config(format!("mix_fraction {} outside [0, 1]", config.mix_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.kind {
        Curriculum::None => {
            let mut out = examples;
            out.shuffle(&mut rng);
            Ok(out)
        }
        Curriculum::Length => Ok(bucketed(examples, config.bucket_width, &mut rng)),
        Curriculum::LengthDifficulty => {
            let mut tiers: BTreeMap<u8, Vec<TrainingExample>> = BTreeMap::new();
            for ex in examples {
                let kind = ex.task_kind.ok_or_else(|| ScheduleError::MissingTaskKind(ex.example_id.clone()))?;
                tiers.entry(kind.difficulty_tier()).or_default().push(ex);
            }
            let mut out: Vec<TrainingExample> = tiers
                .into_values()
                .flat_map(|tier| bucketed(tier, config.bucket_width, &mut rng))
                .collect();
            let moves = (config.mix_fraction * out.len() as f64).round() as usize;
            let mut picked = rand::seq::index::sample(&mut rng, out.len(), moves).into_vec();
            picked.sort_unstable_by(|a, b| b.cmp(a));
            let moved: Vec<TrainingExample> = picked.into_iter().map(|i| out.remove(i)).collect();
            for ex in moved {
                let at = rng.gen_range(0..=out.len());
                out.insert(at, ex);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub pack_id: String,
    pub example_ids: Vec<String>,
    pub total_tokens: u64,
    /// Loss-normalization denominator for the pack.
    pub assistant_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub budget: u64,
}

/// Greedy order-preserving packing; examples are never split or truncated.
pub fn pack_sequences(
    examples: &[TrainingExample],
    budget: u64,
    stage: Option<Stage>,
) -> Result<Vec<PackedSequence>, ScheduleError> {
    if budget == 0 {
        return Err(ScheduleError::Config("pack budget must be positive".into()));
    }
    let prefix = match stage {
        Some(Stage::Short) => "short",
        Some(Stage::Long) => "long",
        None => "pack",
    };
    let mut packs: Vec<PackedSequence> = Vec::new();
    let mut open: Option<PackedSequence> = None;
    for ex in examples {
        if ex.token_estimate > budget {
            return Err(ScheduleError::Oversize {
                example_id: ex.example_id.clone(),
                tokens: ex.token_estimate,
                budget,
            });
        }
        if open.as_ref().is_some_and(|p| p.total_tokens + ex.token_estimate > budget) {
            packs.extend(open.take());
        }
        let pack = open.get_or_insert_with(|| PackedSequence {
            pack_id: format!("{prefix}-{:06}", packs.len()),
            example_ids: Vec::new(),
            total_tokens: 0,
            assistant_tokens: 0,
            stage,
            budget,
        });
        pack.example_ids.push(ex.example_id.clone());
        pack.total_tokens += ex.token_estimate;
        pack.assistant_tokens += ex.assistant_tokens;
    }
    packs.extend(open);
    Ok(packs)
}

fn page_marker(i: usize) -> String {
    format!("Page {i}:\n")
}

fn is_page_marker(text: &str) -> bool {
    text.strip_prefix("Page ")
        .and_then(|r| r.strip_suffix(":\n"))
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

/// Prefix every image with a `Page i:` text item, numbered across the whole
/// conversation. Existing markers directly before images are replaced.
pub fn inject_page_indices(mut example: TrainingExample) -> TrainingExample {
    let mut next = 1;
    for message in &mut example.messages {
        message.content = with_page_markers(&message.content, &mut next);
    }
    example
}

fn with_page_markers(content: &[ContentItem], next: &mut usize) -> Vec<ContentItem> {
    let mut out = Vec::with_capacity(content.len() * 2);
    for (i, item) in content.iter().enumerate() {
        let marker_before_image = item.as_text().is_some_and(is_page_marker)
            && content.get(i + 1).is_some_and(ContentItem::is_image);
        if marker_before_image {
            continue;
        }
        if item.is_image() {
            out.push(ContentItem::text(page_marker(*next)));
            *next += 1;
        }
        out.push(item.clone());
    }
    out
}

/// Page-indexed copy of a message list.
pub fn inject_page_indices_messages(messages: &[Message]) -> Vec<Message> {
    let mut next = 1;
    messages
        .iter()
        .map(|m| Message::new(m.role, with_page_markers(&m.content, &mut next)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::{Origin, TaskKind};
    use proptest::prelude::*;

    fn ex(id: &str, pages: usize, tokens: u64) -> TrainingExample {
        TrainingExample {
            example_id: id.into(),
            pipeline: "t".into(),
            task_kind: None,
            messages: vec![],
            page_refs: vec![],
            origin_marks: vec![Origin::Filler; pages],
            page_count: pages,
            token_estimate: tokens,
            assistant_tokens: tokens / 10,
            stage: None,
            trace: None,
        }
    }

    fn pages_of(list: &[TrainingExample]) -> Vec<usize> {
        list.iter().map(|e| e.page_count).collect()
    }

    #[test]
    fn stage_thresholds() {
        let split = split_stages([5, 104, 105, 336, 400].iter().map(|&p| ex("e", p, 1)).collect());
        assert_eq!(pages_of(&split.short), [5, 104]);
        assert_eq!(pages_of(&split.long), [105, 336]);
        assert_eq!(pages_of(&split.dropped), [400]);
        assert!(split.short.iter().all(|e| e.stage == Some(Stage::Short)));
        let split = split_stages(vec![ex("a", 1, 1), ex("b", 50, 1)]);
        assert!(split.long.is_empty());
    }

    #[test]
    fn length_buckets() {
        let examples = [50, 3, 200, 10].iter().map(|&p| ex(&format!("p{p}"), p, 1)).collect();
        let ordered = order_curriculum(examples, &CurriculumConfig::new(Curriculum::Length, 3)).unwrap();
        let pages = pages_of(&ordered);
        let mut head = pages[..2].to_vec();
        head.sort();
        assert_eq!(head, [3, 10]);
        assert_eq!(&pages[2..], [50, 200]);
    }

    #[test]
    fn none_is_seeded() {
        let examples: Vec<_> = (0..20).map(|i| ex(&i.to_string(), i, 1)).collect();
        let cfg = CurriculumConfig::new(Curriculum::None, 9);
        let a = order_curriculum(examples.clone(), &cfg).unwrap();
        let b = order_curriculum(examples, &cfg).unwrap();
        assert_eq!(a, b);
    }

    fn tasked(kind: TaskKind, i: usize) -> TrainingExample {
        let mut e = ex(&format!("{}-{i}", kind.as_str()), i % 40 + 1, 10);
        e.task_kind = Some(kind);
        e
    }

    #[test]
    fn difficulty_order_without_mixing() {
        let kinds = [TaskKind::Counting, TaskKind::Unshuffle, TaskKind::Fim, TaskKind::RetrievalKey, TaskKind::LcText];
        let examples: Vec<_> = (0..100).map(|i| tasked(kinds[i % 5], i)).collect();
        let mut cfg = CurriculumConfig::new(Curriculum::LengthDifficulty, 1);
        cfg.mix_fraction = 0.0;
        let ordered = order_curriculum(examples, &cfg).unwrap();
        let tiers: Vec<u8> = ordered.iter().map(|e| e.task_kind.unwrap().difficulty_tier()).collect();
        assert!(tiers.windows(2).all(|w| w[0] <= w[1]));
        let last_fim = ordered.iter().rposition(|e| e.task_kind == Some(TaskKind::Fim)).unwrap();
        let first_unshuffle = ordered.iter().position(|e| e.task_kind == Some(TaskKind::Unshuffle)).unwrap();
        assert!(last_fim < first_unshuffle);
    }

    #[test]
    fn mixing_relocates_a_fraction() {
        let kinds = [TaskKind::Fim, TaskKind::Counting];
        let examples: Vec<_> = (0..200).map(|i| tasked(kinds[i % 2], i)).collect();
        let cfg = CurriculumConfig::new(Curriculum::LengthDifficulty, 5);
        let ordered = order_curriculum(examples, &cfg).unwrap();
        assert_eq!(ordered.len(), 200);
        let out_of_place = ordered[..100].iter().filter(|e| e.task_kind == Some(TaskKind::Counting)).count();
        assert!(out_of_place > 0 && out_of_place <= 20, "{out_of_place}");
    }

    #[test]
    fn missing_task_kind_rejected() {
        let cfg = CurriculumConfig::new(Curriculum::LengthDifficulty, 0);
        assert!(matches!(order_curriculum(vec![ex("x", 1, 1)], &cfg), Err(ScheduleError::MissingTaskKind(_))));
    }

    #[test]
    fn lc_text_uses_pseudo_pages() {
        let mut e = ex("lc", 0, 20_000);
        e.task_kind = Some(TaskKind::LcText);
        assert_eq!(effective_pages(&e), 20);
    }

    #[test]
    fn greedy_packing_trace() {
        let examples: Vec<_> = [6, 3, 5, 2].iter().enumerate().map(|(i, &t)| ex(&i.to_string(), 1, t)).collect();
        let packs = pack_sequences(&examples, 10, None).unwrap();
        let ids: Vec<Vec<String>> = packs.iter().map(|p| p.example_ids.clone()).collect();
        assert_eq!(ids, [vec!["0", "1"], vec!["2", "3"]]);
        assert_eq!(packs[0].total_tokens, 9);
        let packs = pack_sequences(&[ex("a", 1, 10)], 10, None).unwrap();
        assert_eq!(packs.len(), 1);
        assert_eq!(packs[0].total_tokens, 10);
        assert!(matches!(
            pack_sequences(&[ex("big", 1, 11)], 10, None),
            Err(ScheduleError::Oversize { ref example_id, .. }) if example_id == "big"
        ));
    }

    proptest! {
        #[test]
        fn packing_invariants(sizes in proptest::collection::vec(1u64..=50, 0..60), budget in 50u64..120) {
            let examples: Vec<_> = sizes.iter().enumerate().map(|(i, &t)| ex(&i.to_string(), 1, t)).collect();
            let packs = pack_sequences(&examples, budget, Some(Stage::Short)).unwrap();
            let flat: Vec<String> = packs.iter().flat_map(|p| p.example_ids.clone()).collect();
            let expected: Vec<String> = (0..sizes.len()).map(|i| i.to_string()).collect();
            prop_assert_eq!(flat, expected);
            let mut cursor = 0;
            for (k, pack) in packs.iter().enumerate() {
                prop_assert!(pack.total_tokens <= budget);
                cursor += pack.example_ids.len();
                if k + 1 < packs.len() {
                    prop_assert!(pack.total_tokens + sizes[cursor] > budget);
                }
            }
            let assistant: u64 = packs.iter().map(|p| p.assistant_tokens).sum();
            prop_assert_eq!(assistant, examples.iter().map(|e| e.assistant_tokens).sum::<u64>());
        }

        #[test]
        fn length_curriculum_bucket_max_ascends(pages in proptest::collection::vec(1usize..400, 1..80), seed in 0u64..100) {
            let examples: Vec<_> = pages.iter().enumerate().map(|(i, &p)| ex(&i.to_string(), p, 1)).collect();
            let ordered = order_curriculum(examples, &CurriculumConfig::new(Curriculum::Length, seed)).unwrap();
            let buckets: Vec<usize> = ordered.iter().map(|e| e.page_count / 16).collect();
            prop_assert!(buckets.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn visual(pages: usize) -> TrainingExample {
        let mut e = ex("v", pages, 1);
        let mut content: Vec<ContentItem> = (0..pages).map(|i| ContentItem::image(format!("p{i}.png"))).collect();
        content.push(ContentItem::text("question"));
        e.messages = vec![Message::user(content), Message::assistant("answer")];
        e
    }

    #[test]
    fn page_markers_precede_images() {
        let out = inject_page_indices(visual(3));
        let texts: Vec<String> = out.messages[0]
            .content
            .iter()
            .map(|c| c.as_text().map(str::to_string).unwrap_or_else(|| "<img>".into()))
            .collect();
        assert_eq!(texts, ["Page 1:\n", "<img>", "Page 2:\n", "<img>", "Page 3:\n", "<img>", "question"]);
        let one = inject_page_indices(visual(1));
        assert_eq!(one.messages[0].content[0].as_text(), Some("Page 1:\n"));
    }

    #[test]
    fn injection_is_idempotent() {
        for n in 1..6 {
            let once = inject_page_indices(visual(n));
            assert_eq!(inject_page_indices(once.clone()), once);
        }
    }
}

//! Context assembly around a question page.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SftError;
use crate::corpus::{Corpus, NeighborBand, Page, CLOSE_NEIGHBOR_RANKS};
use crate::example::{ContentItem, Origin};

/// Allowed page counts for the short strategies.
pub const SHORT_PAGES: std::ops::RangeInclusive<usize> = 2..=5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    AdjacentRange,
    WholeDocument,
    HardNegative,
    DistractorShort,
    AdjacentShort,
    HnShort,
}

impl ContextStrategy {
    fn uses_negatives(self) -> bool {
        matches!(
            self,
            ContextStrategy::HardNegative | ContextStrategy::DistractorShort | ContextStrategy::HnShort
        )
    }

    fn is_short(self) -> bool {
        matches!(
            self,
            ContextStrategy::DistractorShort | ContextStrategy::AdjacentShort | ContextStrategy::HnShort
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPage {
    pub page_id: String,
    pub doc_id: String,
    pub index: usize,
    pub image_ref: String,
    pub origin: Origin,
    /// 1-based rank in the question page's neighbor list, for negatives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbor_rank: Option<usize>,
}

impl ContextPage {
    pub fn from_page(page: &Page, origin: Origin) -> Self {
        Self {
            page_id: page.page_id.clone(),
            doc_id: page.doc_id.clone(),
            index: page.index,
            image_ref: page.image_ref.clone(),
            origin,
            neighbor_rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledContext {
    pub strategy: ContextStrategy,
    /// Pages in presentation order.
    pub pages: Vec<ContextPage>,
}

impl AssembledContext {
    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn image_items(&self) -> Vec<ContentItem> {
        self.pages.iter().map(|p| ContentItem::image(&p.image_ref)).collect()
    }

    pub fn question_pages(&self) -> impl Iterator<Item = &ContextPage> {
        self.pages.iter().filter(|p| p.origin == Origin::Question)
    }

    /// Stable identifier used in request tags.
    pub fn key(&self) -> String {
        let first = self
            .question_pages()
            .next()
            .or(self.pages.first())
            .map(|p| p.page_id.as_str())
            .unwrap_or("empty");
        format!("{first}+{}", self.pages.len())
    }

    pub fn validate(&self) -> Result<(), SftError> {
        if self.strategy.is_short() && !SHORT_PAGES.contains(&self.pages.len()) {
            return Err(SftError::Precondition(format!(
                "{:?} context has {} pages, expected 2..=5",
                self.strategy,
                self.pages.len()
            )));
        }
        if matches!(self.strategy, ContextStrategy::AdjacentRange | ContextStrategy::AdjacentShort) {
            let contiguous = self.pages.windows(2).all(|w| {
                w[0].doc_id == w[1].doc_id && w[1].index == w[0].index + 1
            });
            if !contiguous {
                return Err(SftError::Precondition("adjacent context is not contiguous".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextParams {
    /// Total pages; sampled when absent (2..=5 for short strategies).
    #[serde(default)]
    pub size: Option<usize>,
    /// Negatives added by the `hard_negative` strategy.
    #[serde(default = "default_negatives")]
    pub negatives: usize,
}

fn default_negatives() -> usize {
    4
}

impl Default for ContextParams {
    fn default() -> Self {
        Self {
            size: None,
            negatives: default_negatives(),
        }
    }
}

/// Build a context around `question_page_id` with the given strategy.
///
/// Adjacent windows are centered on the question page and kept in document
/// order; negative strategies shuffle presentation with the seed.
pub fn assemble_context(
    strategy: ContextStrategy,
    corpus: &Corpus,
    question_page_id: &str,
    params: &ContextParams,
    seed: u64,
) -> Result<AssembledContext, SftError> {
    let question = corpus.page(question_page_id)?;
    let doc = corpus.document(&question.doc_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = doc.pages.len();
    let origin = |p: &Page| {
        if p.page_id == question.page_id {
            Origin::Question
        } else {
            Origin::Filler
        }
    };

    let short_size = |rng: &mut ChaCha8Rng| -> Result<usize, SftError> {
        match params.size {
            Some(s) if SHORT_PAGES.contains(&s) => Ok(s),
            Some(s) => Err(SftError::Precondition(format!("short context size {s} outside 2..=5"))),
            None => Ok(rng.gen_range(SHORT_PAGES)),
        }
    };

    let pages = match strategy {
        ContextStrategy::WholeDocument => doc.pages.iter().map(|p| ContextPage::from_page(p, origin(p))).collect(),
        ContextStrategy::AdjacentRange | ContextStrategy::AdjacentShort => {
            let size = if strategy == ContextStrategy::AdjacentShort {
                short_size(&mut rng)?
            } else {
                match params.size {
                    Some(0) => return Err(SftError::Precondition("context size must be positive".into())),
                    Some(s) => s,
                    None => rng.gen_range(2.min(n)..=n),
                }
            };
            if size > n {
                return Err(SftError::Insufficient(format!(
                    "document {} has {n} pages, window needs {size}",
                    doc.doc_id
                )));
            }
            let start = question.index.saturating_sub((size - 1) / 2).min(n - size);
            doc.pages[start..start + size]
                .iter()
                .map(|p| ContextPage::from_page(p, origin(p)))
                .collect()
        }
        ContextStrategy::HardNegative | ContextStrategy::DistractorShort | ContextStrategy::HnShort => {
            let (band, wanted) = match strategy {
                ContextStrategy::HardNegative => (NeighborBand::WithinFirst32, params.negatives),
                ContextStrategy::DistractorShort => (NeighborBand::OutsideFirst32, short_size(&mut rng)? - 1),
                _ => (NeighborBand::WithinFirst32, short_size(&mut rng)? - 1),
            };
            let index = corpus.neighbors.as_ref().ok_or_else(|| {
                SftError::Insufficient("negative strategies need a neighbor index".into())
            })?;
            let offset = if band == NeighborBand::OutsideFirst32 { CLOSE_NEIGHBOR_RANKS } else { 0 };
            let candidates: Vec<(usize, &Page)> = index
                .band(&question.page_id, band)?
                .iter()
                .enumerate()
                .filter_map(|(i, nb)| corpus.page(&nb.page_id).ok().map(|p| (offset + i + 1, p)))
                .collect();
            if candidates.len() < wanted {
                return Err(SftError::Insufficient(format!(
                    "{} has {} usable neighbors in {band:?}, need {wanted}",
                    question.page_id,
                    candidates.len()
                )));
            }
            let mut pages = vec![ContextPage::from_page(question, Origin::Question)];
            for (rank, page) in candidates.choose_multiple(&mut rng, wanted) {
                let mut cp = ContextPage::from_page(page, Origin::Filler);
                cp.neighbor_rank = Some(*rank);
                pages.push(cp);
            }
            pages.shuffle(&mut rng);
            pages
        }
    };
    let context = AssembledContext { strategy, pages };
    debug_assert!(!strategy.uses_negatives() || context.question_pages().count() == 1);
    context.validate()?;
    Ok(context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sft::testutil::corpus_with_neighbors;

    fn indices(ctx: &AssembledContext) -> Vec<usize> {
        ctx.pages.iter().map(|p| p.index).collect()
    }

    #[test]
    fn adjacent_short_window_is_centered() {
        let corpus = corpus_with_neighbors();
        let params = ContextParams { size: Some(3), ..Default::default() };
        let ctx = assemble_context(ContextStrategy::AdjacentShort, &corpus, "doc0-p4", &params, 1).unwrap();
        assert_eq!(indices(&ctx), [3, 4, 5]);
        assert_eq!(ctx.question_pages().count(), 1);
        // window clamps at document edges
        let ctx = assemble_context(ContextStrategy::AdjacentShort, &corpus, "doc0-p9", &params, 1).unwrap();
        assert_eq!(indices(&ctx), [7, 8, 9]);
    }

    #[test]
    fn whole_document_in_order() {
        let corpus = corpus_with_neighbors();
        let ctx = assemble_context(ContextStrategy::WholeDocument, &corpus, "doc2-p3", &ContextParams::default(), 0).unwrap();
        assert_eq!(indices(&ctx), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn distractor_short_uses_ranks_beyond_32() {
        let corpus = corpus_with_neighbors();
        let params = ContextParams { size: Some(5), ..Default::default() };
        let ctx = assemble_context(ContextStrategy::DistractorShort, &corpus, "doc1-p0", &params, 3).unwrap();
        assert_eq!(ctx.len(), 5);
        assert_eq!(ctx.question_pages().count(), 1);
        assert!(ctx
            .pages
            .iter()
            .filter(|p| p.origin == Origin::Filler)
            .all(|p| p.neighbor_rank.unwrap() > 32));
    }

    #[test]
    fn hn_short_uses_first_32() {
        let corpus = corpus_with_neighbors();
        let ctx = assemble_context(ContextStrategy::HnShort, &corpus, "doc1-p0", &ContextParams::default(), 8).unwrap();
        assert!(ctx
            .pages
            .iter()
            .filter(|p| p.origin == Origin::Filler)
            .all(|p| p.neighbor_rank.unwrap() <= 32));
    }

    #[test]
    fn hard_negative_count() {
        let corpus = corpus_with_neighbors();
        let params = ContextParams { size: None, negatives: 6 };
        let ctx = assemble_context(ContextStrategy::HardNegative, &corpus, "doc1-p0", &params, 8).unwrap();
        assert_eq!(ctx.len(), 7);
    }

    #[test]
    fn errors_on_short_documents_and_missing_neighbors() {
        let mut corpus = corpus_with_neighbors();
        let params = ContextParams { size: Some(11), ..Default::default() };
        assert!(matches!(
            assemble_context(ContextStrategy::AdjacentRange, &corpus, "doc0-p0", &params, 0),
            Err(SftError::Insufficient(_))
        ));
        let params = ContextParams { size: Some(6), ..Default::default() };
        assert!(assemble_context(ContextStrategy::AdjacentShort, &corpus, "doc0-p0", &params, 0).is_err());
        corpus.neighbors = None;
        assert!(matches!(
            assemble_context(ContextStrategy::HnShort, &corpus, "doc0-p0", &ContextParams::default(), 0),
            Err(SftError::Insufficient(_))
        ));
    }

    #[test]
    fn short_sizes_hold_over_many_seeds() {
        let corpus = corpus_with_neighbors();
        let strategies = [ContextStrategy::DistractorShort, ContextStrategy::AdjacentShort, ContextStrategy::HnShort];
        for seed in 0..1000u64 {
            let strategy = strategies[(seed % 3) as usize];
            let page = format!("doc{}-p{}", seed % 15, seed % 10);
            let ctx = assemble_context(strategy, &corpus, &page, &ContextParams::default(), seed).unwrap();
            assert!(SHORT_PAGES.contains(&ctx.len()), "{strategy:?} seed {seed}: {}", ctx.len());
            assert!(ctx.question_pages().all(|q| ctx.pages.contains(q)));
            assert_eq!(ctx.question_pages().count(), 1);
        }
    }

    #[test]
    fn seeded_presentation_is_reproducible() {
        let corpus = corpus_with_neighbors();
        let a = assemble_context(ContextStrategy::HardNegative, &corpus, "doc3-p2", &ContextParams::default(), 77).unwrap();
        let b = assemble_context(ContextStrategy::HardNegative, &corpus, "doc3-p2", &ContextParams::default(), 77).unwrap();
        assert_eq!(a, b);
    }
}

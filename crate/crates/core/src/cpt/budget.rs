//! Image token accounting and resolution fitting.

use serde::{Deserialize, Serialize};

use super::CptError;

/// 128K tokens, the stage-1 packing length.
pub const STAGE1_TOKENS: u64 = 128 * 1024;
/// 336K tokens, the Mistral stage-2 packing length.
pub const STAGE2_TOKENS_MISTRAL: u64 = 336 * 1024;
/// 256K tokens, the Qwen3 VL stage-2 packing length.
pub const STAGE2_TOKENS_QWEN: u64 = 256 * 1024;

pub const PATCH_MISTRAL: u32 = 28;
pub const PATCH_QWEN: u32 = 32;

/// Token limit plus the allowed range of page side lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub max_sequence_tokens: u64,
    pub patch_size: u32,
    pub min_side: u32,
    pub max_side: u32,
}

impl TokenBudget {
    /// CPT range: maximum side 616..=840.
    pub fn cpt(max_sequence_tokens: u64, patch_size: u32) -> Self {
        Self {
            max_sequence_tokens,
            patch_size,
            min_side: 616,
            max_side: 840,
        }
    }

    /// SFT and LongPO range: maximum side 728..=1400.
    pub fn sft(max_sequence_tokens: u64, patch_size: u32) -> Self {
        Self {
            max_sequence_tokens,
            patch_size,
            min_side: 728,
            max_side: 1400,
        }
    }

    pub fn validate(&self) -> Result<(), CptError> {
        if self.patch_size == 0 || self.min_side == 0 || self.max_side == 0 {
            return Err(CptError::InvalidBudget("sides and patch size must be positive".into()));
        }
        if self.min_side > self.max_side {
            return Err(CptError::InvalidBudget(format!(
                "min_side {} exceeds max_side {}",
                self.min_side, self.max_side
            )));
        }
        if self.min_side.div_ceil(self.patch_size) > self.max_side / self.patch_size {
            return Err(CptError::InvalidBudget(format!(
                "no multiple of {} lies in {}..={}",
                self.patch_size, self.min_side, self.max_side
            )));
        }
        Ok(())
    }
}

/// Tokens for one image: `ceil(w / patch) * ceil(h / patch)`.
pub fn estimate_image_tokens(width_px: u32, height_px: u32, patch_size: u32) -> Result<u64, CptError> {
    if width_px == 0 || height_px == 0 || patch_size == 0 {
        return Err(CptError::InvalidBudget(format!(
            "image tokens need positive inputs, got {width_px}x{height_px} patch {patch_size}"
        )));
    }
    Ok(u64::from(width_px.div_ceil(patch_size)) * u64::from(height_px.div_ceil(patch_size)))
}

/// Largest side `s` (a patch multiple within the budget's side range) such
/// that `page_count` square pages of side `s` plus the text fit the budget.
///
/// Never truncates: if even the smallest allowed side overflows, the example
/// does not fit and the caller must drop or re-stage it.
pub fn fit_resolution(page_count: usize, text_tokens: u64, budget: &TokenBudget) -> Result<u32, CptError> {
    budget.validate()?;
    if page_count == 0 {
        return Err(CptError::InvalidBudget("page_count must be at least 1".into()));
    }
    let patch = u64::from(budget.patch_size);
    let lo = u64::from(budget.min_side.div_ceil(budget.patch_size));
    let hi = u64::from(budget.max_side / budget.patch_size);
    let pages = page_count as u64;
    let fits = |tiles: u64| pages * tiles * tiles + text_tokens <= budget.max_sequence_tokens;

    let room = budget.max_sequence_tokens.saturating_sub(text_tokens) / pages;
    let mut tiles = (room as f64).sqrt() as u64;
    // correct floating point drift in either direction
    while tiles > 0 && !fits(tiles) {
        tiles -= 1;
    }
    while fits(tiles + 1) && tiles < hi {
        tiles += 1;
    }
    let tiles = tiles.min(hi);
    if tiles < lo || !fits(tiles) {
        return Err(CptError::DoesNotFit {
            page_count,
            text_tokens,
            budget: budget.max_sequence_tokens,
        });
    }
    Ok((tiles * patch) as u32)
}

/// Worst-case token estimate for `page_count` square pages at `side`.
pub fn page_tokens_at(page_count: usize, side: u32, patch_size: u32) -> u64 {
    let tiles = u64::from(side / patch_size);
    page_count as u64 * tiles * tiles
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over patch multiples.
    fn brute_force(page_count: usize, text: u64, budget: &TokenBudget) -> Option<u32> {
        (1..=budget.max_side / budget.patch_size)
            .map(|t| t * budget.patch_size)
            .filter(|&s| s >= budget.min_side)
            .filter(|&s| page_tokens_at(page_count, s, budget.patch_size) + text <= budget.max_sequence_tokens)
            .max()
    }

    #[test]
    fn image_token_examples() {
        assert_eq!(estimate_image_tokens(840, 840, 28).unwrap(), 900);
        assert_eq!(estimate_image_tokens(616, 616, 28).unwrap(), 484);
        assert_eq!(estimate_image_tokens(65, 64, 32).unwrap(), 6);
        assert!(estimate_image_tokens(0, 10, 28).is_err());
    }

    #[test]
    fn fit_examples() {
        let b = TokenBudget::cpt(STAGE1_TOKENS, 28);
        assert_eq!(fit_resolution(100, 1000, &b).unwrap(), 840);
        assert_eq!(100 * 900 + 1000, 91_000);
        let tight = TokenBudget { max_sequence_tokens: 120_000, ..b };
        assert_eq!(fit_resolution(200, 0, &tight).unwrap(), 672);
        assert_eq!(brute_force(200, 0, &tight), Some(672));
        assert_eq!(fit_resolution(1, 0, &b).unwrap(), 840);
    }

    #[test]
    fn does_not_fit_is_an_error() {
        let b = TokenBudget::cpt(STAGE1_TOKENS, 28);
        // 616 / 28 = 22 tiles, 484 tokens per page; 271 pages need 131,164
        let err = fit_resolution(271, 0, &b).unwrap_err();
        assert!(matches!(err, CptError::DoesNotFit { .. }));
        assert_eq!(fit_resolution(270, 0, &b).unwrap(), 616);
    }

    #[test]
    fn sides_round_to_patch_multiples() {
        let b = TokenBudget::sft(STAGE1_TOKENS, 32);
        assert_eq!(fit_resolution(1, 0, &b).unwrap(), 1376);
        assert!(TokenBudget { min_side: 900, max_side: 910, ..b }.validate().is_err());
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(pages in 1usize..400, text in 0u64..60_000, budget in 10_000u64..400_000, qwen in any::<bool>(), sft in any::<bool>()) {
            let patch = if qwen { 32 } else { 28 };
            let b = if sft { TokenBudget::sft(budget, patch) } else { TokenBudget::cpt(budget, patch) };
            let fast = fit_resolution(pages, text, &b).ok();
            prop_assert_eq!(fast, brute_force(pages, text, &b));
            if let Some(s) = fast {
                prop_assert!(page_tokens_at(pages, s, patch) + text <= budget);
                let next = s + patch;
                prop_assert!(next > b.max_side || page_tokens_at(pages, next, patch) + text > budget);
            }
        }

        #[test]
        fn image_tokens_monotone(w in 1u32..3000, h in 1u32..3000, dw in 0u32..100, dh in 0u32..100, patch in 1u32..64) {
            let base = estimate_image_tokens(w, h, patch).unwrap();
            prop_assert!(estimate_image_tokens(w + dw, h + dh, patch).unwrap() >= base);
            let tiles = (w / patch).max(1);
            let side = tiles * patch;
            prop_assert_eq!(estimate_image_tokens(side, side, patch).unwrap(), u64::from(tiles * tiles));
        }
    }
}

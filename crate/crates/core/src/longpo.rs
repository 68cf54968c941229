//! LongPO preference pairs and the reference objective.
//!
//! A pair holds a response generated from the short context that produced
//! the question (chosen) and one generated from the full long context
//! (rejected). Log-probabilities are supplied offline; this module only
//! evaluates the objective and its analytic gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::example::{ContentItem, Message, Origin};
use crate::genclient::{complete_batch, ChatClient, ChatRequest};
use crate::sft::{
    assemble_context, generate_sp_questions, page_seed, AssembledContext, ContextPage, ContextParams, ContextStrategy,
    ModelHandle, QuestionConfig, SftError,
};
use crate::templates::Templates;

#[derive(Debug, thiserror::Error)]
pub enum LongPoError {
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error("pair {pair}: {field} has {got} entries, expected {expected}")]
    LengthMismatch {
        pair: usize,
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("pair {pair}: {field} contains a non-finite or positive log-probability")]
    InvalidLogprob { pair: usize, field: &'static str },
    #[error("pair {pair}: {message}")]
    Invalid { pair: usize, message: String },
    #[error("no pairs supplied")]
    Empty,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongPoConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_beta() -> f64 {
    0.1
}

fn default_lambda() -> f64 {
    0.01
}

impl Default for LongPoConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            lambda: default_lambda(),
        }
    }
}

impl LongPoConfig {
    pub fn validate(&self) -> Result<(), LongPoError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(LongPoError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LongPoError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub question: String,
    /// Image refs of the pages that produced the question, in document order.
    pub short_context: Vec<String>,
    /// Image refs of the full context, in presentation order.
    pub long_context: Vec<String>,
    pub chosen: String,
    pub rejected: String,
    #[serde(default)]
    pub logp_theta_w_given_l: Vec<f64>,
    #[serde(default)]
    pub logp_theta_l_given_l: Vec<f64>,
    #[serde(default)]
    pub logp_ref_w_given_s: Vec<f64>,
    #[serde(default)]
    pub logp_ref_l_given_s: Vec<f64>,
}

impl PreferencePair {
    fn check(&self, pair: usize) -> Result<(), LongPoError> {
        let w = self.logp_theta_w_given_l.len();
        let l = self.logp_theta_l_given_l.len();
        if w == 0 {
            return Err(LongPoError::Invalid { pair, message: "chosen response has no tokens".into() });
        }
        if l == 0 {
            return Err(LongPoError::Invalid { pair, message: "rejected response has no tokens".into() });
        }
        let fields: [(&'static str, &[f64], usize); 4] = [
            ("logp_theta_w_given_l", &self.logp_theta_w_given_l, w),
            ("logp_ref_w_given_s", &self.logp_ref_w_given_s, w),
            ("logp_theta_l_given_l", &self.logp_theta_l_given_l, l),
            ("logp_ref_l_given_s", &self.logp_ref_l_given_s, l),
        ];
        for (field, values, expected) in fields {
            if values.len() != expected {
                return Err(LongPoError::LengthMismatch { pair, field, got: values.len(), expected });
            }
            if values.iter().any(|v| !v.is_finite() || *v > 0.0) {
                return Err(LongPoError::InvalidLogprob { pair, field });
            }
        }
        Ok(())
    }

    /// β times the difference of policy-over-reference log ratios.
    pub fn margin(&self, beta: f64) -> f64 {
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let chosen = sum(&self.logp_theta_w_given_l) - sum(&self.logp_ref_w_given_s);
        let rejected = sum(&self.logp_theta_l_given_l) - sum(&self.logp_ref_l_given_s);
        beta * (chosen - rejected)
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub pref_term: f64,
    pub nll_term: f64,
    pub per_pair_margins: Vec<f64>,
}

/// Gradient of the batch loss with respect to every supplied log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGradient {
    pub theta_w: Vec<f64>,
    pub theta_l: Vec<f64>,
    pub ref_w: Vec<f64>,
    pub ref_l: Vec<f64>,
}

fn validate_batch(pairs: &[PreferencePair], config: &LongPoConfig) -> Result<(), LongPoError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(LongPoError::Empty);
    }
    pairs.iter().enumerate().try_for_each(|(i, p)| p.check(i))
}

/// Batch-mean preference term plus token-mean NLL of the chosen response.
pub fn longpo_loss(pairs: &[PreferencePair], config: &LongPoConfig) -> Result<LossReport, LongPoError> {
    validate_batch(pairs, config)?;
    let n = pairs.len() as f64;
    let per_pair_margins: Vec<f64> = pairs.iter().map(|p| p.margin(config.beta)).collect();
    let pref_term = per_pair_margins.iter().map(|&m| config.lambda * softplus(-m)).sum::<f64>() / n;
    let nll_term = pairs
        .iter()
        .map(|p| -p.logp_theta_w_given_l.iter().sum::<f64>() / p.logp_theta_w_given_l.len() as f64)
        .sum::<f64>()
        / n;
    Ok(LossReport {
        loss: pref_term + nll_term,
        pref_term,
        nll_term,
        per_pair_margins,
    })
}

pub fn longpo_gradients(pairs: &[PreferencePair], config: &LongPoConfig) -> Result<Vec<PairGradient>, LongPoError> {
    validate_batch(pairs, config)?;
    let n = pairs.len() as f64;
    Ok(pairs
        .iter()
        .map(|p| {
            // d/dm of λ·softplus(−m) is −λ·σ(−m)
            let g = config.lambda * config.beta * sigmoid(-p.margin(config.beta)) / n;
            let w = p.logp_theta_w_given_l.len();
            let l = p.logp_theta_l_given_l.len();
            PairGradient {
                theta_w: vec![-g - 1.0 / (n * w as f64); w],
                theta_l: vec![g; l],
                ref_w: vec![g; w],
                ref_l: vec![-g; l],
            }
        })
        .collect())
}

/// Chosen response from the origin pages, rejected from the full context.
pub fn build_preference_pair(
    pair_id: impl Into<String>,
    question: &str,
    context: &AssembledContext,
    origin_page_ids: &[String],
    policy: &ModelHandle,
) -> Result<PreferencePair, LongPoError> {
    if origin_page_ids.is_empty() {
        return Err(SftError::Precondition("origin pages must be non-empty".into()).into());
    }
    let mut short: Vec<&ContextPage> = Vec::with_capacity(origin_page_ids.len());
    for id in origin_page_ids {
        let page = context
            .pages
            .iter()
            .find(|p| &p.page_id == id)
            .ok_or_else(|| SftError::Precondition(format!("origin page {id} is not in the long context")))?;
        short.push(page);
    }
    short.sort_by(|a, b| (&a.doc_id, a.index).cmp(&(&b.doc_id, b.index)));
    short.dedup_by(|a, b| a.page_id == b.page_id);
    let pair_id = pair_id.into();

    let request = |side: &str, pages: &[&ContextPage]| {
        let mut content: Vec<ContentItem> = pages.iter().map(|p| ContentItem::image(&p.image_ref)).collect();
        content.push(ContentItem::text(question));
        ChatRequest::new(policy.model, format!("longpo_{side}:{pair_id}"), vec![Message::user(content)])
    };
    let long: Vec<&ContextPage> = context.pages.iter().collect();
    let requests = [request("chosen", &short), request("rejected", &long)];
    let mut texts = Vec::with_capacity(2);
    for (result, request) in complete_batch(policy.client, &requests, policy.max_in_flight).into_iter().zip(&requests) {
        let text = result.into_text().map_err(SftError::from)?.trim().to_string();
        if text.is_empty() {
            return Err(SftError::EmptyCompletion(request.request_tag.clone()).into());
        }
        texts.push(text);
    }
    let rejected = texts.pop().unwrap_or_default();
    let chosen = texts.pop().unwrap_or_default();
    Ok(PreferencePair {
        pair_id,
        question: question.to_string(),
        short_context: short.iter().map(|p| p.image_ref.clone()).collect(),
        long_context: long.iter().map(|p| p.image_ref.clone()).collect(),
        chosen,
        rejected,
        logp_theta_w_given_l: Vec::new(),
        logp_theta_l_given_l: Vec::new(),
        logp_ref_w_given_s: Vec::new(),
        logp_ref_l_given_s: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairGenConfig {
    pub policy_model: String,
    #[serde(default)]
    pub question_model: Option<String>,
    #[serde(default = "default_strategy")]
    pub strategy: ContextStrategy,
    #[serde(default)]
    pub context: ContextParams,
    #[serde(default)]
    pub questions: QuestionConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_pairs: Option<usize>,
    /// Dataset size target carried into run manifests.
    #[serde(default = "default_target")]
    pub target_pairs: usize,
}

fn default_strategy() -> ContextStrategy {
    ContextStrategy::WholeDocument
}

fn default_target() -> usize {
    36_000
}

/// One pair per question page: an archetype question from the page, the
/// page as short context and the assembled context as long context.
pub fn build_pairs(
    corpus: &Corpus,
    config: &PairGenConfig,
    client: &dyn ChatClient,
    templates: &Templates,
    max_in_flight: usize,
) -> (Vec<PreferencePair>, Vec<(String, String)>) {
    let policy = ModelHandle::new(client, &config.policy_model).with_max_in_flight(max_in_flight);
    let questioner = ModelHandle::new(client, config.question_model.as_deref().unwrap_or(&config.policy_model))
        .with_max_in_flight(max_in_flight);
    let mut pages: Vec<String> = corpus.filter_question_pages().into_iter().collect();
    if let Some(limit) = config.max_pairs {
        pages.truncate(limit);
    }
    let results: Vec<(String, Result<PreferencePair, LongPoError>)> = pages
        .par_iter()
        .map(|page_id| {
            let run = || -> Result<PreferencePair, LongPoError> {
                let seed = page_seed(config.seed, page_id);
                let page = corpus.page(page_id).map_err(SftError::from)?;
                let context = assemble_context(config.strategy, corpus, page_id, &config.context, seed)?;
                let question = generate_sp_questions(page, &questioner, templates, &config.questions, seed)?;
                let origins: Vec<String> = context
                    .pages
                    .iter()
                    .filter(|p| p.origin == Origin::Question)
                    .map(|p| p.page_id.clone())
                    .collect();
                build_preference_pair(format!("longpo:{page_id}"), &question.text, &context, &origins, &policy)
            };
            (page_id.clone(), run())
        })
        .collect();
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for (page_id, result) in results {
        match result {
            Ok(pair) => pairs.push(pair),
            Err(err) => failures.push((page_id, err.to_string())),
        }
    }
    (pairs, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::document;
    use crate::genclient::{FnClient, MockClient, MockRule};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(tw: Vec<f64>, rw: Vec<f64>, tl: Vec<f64>, rl: Vec<f64>) -> PreferencePair {
        PreferencePair {
            pair_id: "p".into(),
            question: "q".into(),
            short_context: vec![],
            long_context: vec![],
            chosen: "w".into(),
            rejected: "l".into(),
            logp_theta_w_given_l: tw,
            logp_theta_l_given_l: tl,
            logp_ref_w_given_s: rw,
            logp_ref_l_given_s: rl,
        }
    }

    #[test]
    fn zero_margin() {
        let p = pair(vec![-0.5, -0.5], vec![-0.5, -0.5], vec![-1.0], vec![-1.0]);
        let r = longpo_loss(&[p], &LongPoConfig::default()).unwrap();
        assert_eq!(r.per_pair_margins, [0.0]);
        assert!((r.pref_term - 0.01 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((r.nll_term - 0.5).abs() < 1e-15);
        assert!((r.loss - 0.506_931_5).abs() < 1e-7);
    }

    #[test]
    fn worked_margin_example() {
        let p = pair(vec![-2.5; 4], vec![-3.0; 4], vec![-10.0, -10.0], vec![-7.5, -7.5]);
        let r = longpo_loss(&[p], &LongPoConfig::default()).unwrap();
        assert!((r.per_pair_margins[0] - 0.7).abs() < 1e-12);
        // −log σ(0.7) = log(1 + e^−0.7), evaluated independently
        let pref = 0.01 * (1.0 + (-0.7f64).exp()).ln();
        assert!((r.pref_term - pref).abs() < 1e-12);
        assert!((r.pref_term - 0.004_031_8).abs() < 1e-7);
        assert!((r.nll_term - 2.5).abs() < 1e-12);
        assert!((r.loss - 2.504_031_8).abs() < 1e-7);
    }

    #[test]
    fn validation_errors() {
        let cfg = LongPoConfig::default();
        let p = pair(vec![-1.0, -1.0], vec![-1.0], vec![-1.0], vec![-1.0]);
        assert!(matches!(longpo_loss(&[p], &cfg), Err(LongPoError::LengthMismatch { field: "logp_ref_w_given_s", .. })));
        let p = pair(vec![f64::NAN], vec![-1.0], vec![-1.0], vec![-1.0]);
        assert!(matches!(longpo_loss(&[p], &cfg), Err(LongPoError::InvalidLogprob { .. })));
        let p = pair(vec![0.5], vec![-1.0], vec![-1.0], vec![-1.0]);
        assert!(longpo_loss(&[p], &cfg).is_err());
        assert!(matches!(longpo_loss(&[], &cfg), Err(LongPoError::Empty)));
        let bad = LongPoConfig { beta: 0.0, lambda: 0.01 };
        let p = pair(vec![-1.0], vec![-1.0], vec![-1.0], vec![-1.0]);
        assert!(matches!(longpo_loss(&[p], &bad), Err(LongPoError::Config(_))));
    }

    #[test]
    fn extreme_margins_stay_finite() {
        let cfg = LongPoConfig { beta: 1.0, lambda: 0.01 };
        for (tw, tl) in [(-1.0, -701.0), (-701.0, -1.0)] {
            let p = pair(vec![tw], vec![-1.0], vec![tl], vec![-1.0]);
            let r = longpo_loss(&[p], &cfg).unwrap();
            assert!((r.per_pair_margins[0].abs() - 700.0).abs() < 1e-9);
            assert!(r.loss.is_finite());
        }
    }

    #[test]
    fn lambda_zero_is_pure_nll() {
        let cfg = LongPoConfig { beta: 0.1, lambda: 0.0 };
        let p = pair(vec![-1.0, -3.0], vec![-1.0, -1.0], vec![-1.0], vec![-2.0]);
        let r = longpo_loss(&[p], &cfg).unwrap();
        assert_eq!(r.loss, r.nll_term);
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> PreferencePair {
        let w = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=8);
        let mut draw = |n| (0..n).map(|_| rng.gen_range(-2.0..-0.001)).collect::<Vec<f64>>();
        pair(draw(w), draw(w), draw(l), draw(l))
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = LongPoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        type Field = fn(&mut PreferencePair) -> &mut Vec<f64>;
        let fields: [Field; 4] = [
            |p| &mut p.logp_theta_w_given_l,
            |p| &mut p.logp_theta_l_given_l,
            |p| &mut p.logp_ref_w_given_s,
            |p| &mut p.logp_ref_l_given_s,
        ];
        for _ in 0..50 {
            let base = random_pair(&mut rng);
            let g = longpo_gradients(std::slice::from_ref(&base), &cfg).unwrap().remove(0);
            let analytic = [&g.theta_w, &g.theta_l, &g.ref_w, &g.ref_l];
            let loss_of = |p: &PreferencePair| longpo_loss(std::slice::from_ref(p), &cfg).unwrap().loss;
            for (field, grads) in fields.iter().zip(analytic) {
                for (t, &expected) in grads.iter().enumerate() {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    field(&mut plus)[t] += h;
                    field(&mut minus)[t] -= h;
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let scale = numeric.abs().max(expected.abs());
                    assert!((numeric - expected).abs() / scale < 1e-5, "numeric {numeric} analytic {expected}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn raising_chosen_policy_logprob_lowers_both_terms(
            tw in proptest::collection::vec(-2.0f64..-0.1, 1..6),
            bump in 0.01f64..0.09,
        ) {
            let cfg = LongPoConfig::default();
            let n = tw.len();
            let a = pair(tw.clone(), vec![-1.0; n], vec![-1.0], vec![-1.0]);
            let mut raised = tw;
            raised[0] += bump;
            let b = pair(raised, vec![-1.0; n], vec![-1.0], vec![-1.0]);
            let ra = longpo_loss(&[a], &cfg).unwrap();
            let rb = longpo_loss(&[b], &cfg).unwrap();
            prop_assert!(rb.pref_term < ra.pref_term);
            prop_assert!(rb.nll_term < ra.nll_term);
        }

        #[test]
        fn pref_term_bounded(m_scale in -50.0f64..50.0) {
            let cfg = LongPoConfig::default();
            let p = pair(vec![-1.0], vec![-1.0], vec![-1.0], vec![(-1.0 - m_scale).min(0.0)]);
            let r = longpo_loss(&[p], &cfg).unwrap();
            let m = r.per_pair_margins[0];
            prop_assert!(r.pref_term <= cfg.lambda * (1.0 + m.abs().exp()).ln() + 1e-15);
        }
    }

    fn context(n: usize) -> AssembledContext {
        let doc = document("d", n);
        AssembledContext {
            strategy: ContextStrategy::WholeDocument,
            pages: doc.pages.iter().map(|p| ContextPage::from_page(p, Origin::Filler)).collect(),
        }
    }

    #[test]
    fn short_context_is_origin_pages_in_document_order() {
        let client = FnClient::new(|r: &ChatRequest| Ok(format!("{} images", r.image_refs().len())));
        let h = ModelHandle::new(&client, "policy");
        let ctx = context(20);
        let p = build_preference_pair("x", "q", &ctx, &["d-p7".into()], &h).unwrap();
        assert_eq!(p.short_context, ["pages/d/7.png"]);
        assert_eq!(p.long_context.len(), 20);
        assert_eq!(p.chosen, "1 images");
        assert_eq!(p.rejected, "20 images");
        let p = build_preference_pair("x", "q", &ctx, &["d-p5".into(), "d-p3".into()], &h).unwrap();
        assert_eq!(p.short_context, ["pages/d/3.png", "pages/d/5.png"]);
        assert!(build_preference_pair("x", "q", &context(3), &["d-p7".into()], &h).is_err());
        assert!(build_preference_pair("x", "q", &ctx, &[], &h).is_err());
    }

    #[test]
    fn empty_completion_rejected() {
        let mock = MockClient::new(vec![MockRule::tag("longpo_rejected:x", ""), MockRule::fallback("ok")]);
        let h = ModelHandle::new(&mock, "policy");
        assert!(build_preference_pair("x", "q", &context(3), &["d-p1".into()], &h).is_err());
    }

    #[test]
    fn pairs_over_corpus() {
        let corpus = crate::sft::testutil::corpus_with_neighbors();
        let mock = MockClient::new(vec![MockRule::substring("Write ", "1. q1\n2. q2\n3. q3\n4. q4\n5. q5"), MockRule::fallback("resp")]);
        let config = PairGenConfig {
            policy_model: "p".into(),
            question_model: None,
            strategy: ContextStrategy::WholeDocument,
            context: ContextParams::default(),
            questions: QuestionConfig::default(),
            seed: 1,
            max_pairs: Some(5),
            target_pairs: default_target(),
        };
        let (pairs, failures) = build_pairs(&corpus, &config, &mock, &Templates::default(), 2);
        assert!(failures.is_empty());
        assert_eq!(pairs.len(), 5);
        assert!(pairs.iter().all(|p| p.short_context.len() == 1 && p.long_context.len() == 10));
    }
}

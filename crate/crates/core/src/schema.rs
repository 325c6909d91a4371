//! Output-schema parsing, binary verification and regeneration-context
//! construction.
//!
//! The canonical response shape, with every tag a single vocab token:
//!
//! ```text
//! <thinking> <feedback> (feedback content) </feedback> (reasoning) </thinking> <box> (answer) <eos>
//! ```
//!
//! A response is format-compliant iff there is exactly one `<thinking>`
//! block, exactly one `<feedback>` block at its very start, all tags are
//! properly closed, and an answer follows `</thinking>` behind the `<box>`
//! marker. Content between tags is arbitrary (any non-structural tokens);
//! tag order and multiplicity are strict. Parsing never fails — malformed
//! input yields `format_ok = false`. A sequence truncated before
//! `</thinking>` is format-noncompliant; a missing `<eos>` after a complete
//! answer is tolerated.

use crate::env::{check_answer, ProblemInstance};
use crate::feedback::FeedbackText;
use crate::policy::{Context, ForcedPrefix};
use crate::vocab::{TokenId, Vocab};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("feedback must be non-empty")]
    EmptyFeedback,
}

/// Spans of a parsed response. `(start, end)` are half-open token index
/// ranges of the content *inside* the corresponding tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub feedback_span: Option<(usize, usize)>,
    pub reasoning_span: Option<(usize, usize)>,
    pub answer: Option<Vec<TokenId>>,
    pub format_ok: bool,
}

/// Binary verification outcome: reward is 1 iff format and answer both hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierOutcome {
    pub reward: u8,
    pub format_ok: bool,
    pub answer_ok: bool,
}

/// Single-pass parse of a token sequence against the output schema.
/// Total: any input yields a response, never an error.
pub fn parse_response(tokens: &[TokenId], vocab: &Vocab) -> StructuredResponse {
    let eos = vocab.eos();
    // Generation stops at the first <eos>; for arbitrary input we parse the
    // same way and ignore anything after it.
    let body_end = tokens
        .iter()
        .position(|&t| t == eos)
        .unwrap_or(tokens.len());
    let body = &tokens[..body_end];

    let fail = |feedback_span, reasoning_span| StructuredResponse {
        feedback_span,
        reasoning_span,
        answer: None,
        format_ok: false,
    };

    let mut i = 0;
    if body.get(i) != Some(&vocab.thinking_open()) {
        return fail(None, None);
    }
    i += 1;
    if body.get(i) != Some(&vocab.feedback_open()) {
        return fail(None, None);
    }
    i += 1;
    let fb_start = i;
    while i < body.len() && !vocab.is_structural(body[i]) {
        i += 1;
    }
    if body.get(i) != Some(&vocab.feedback_close()) {
        return fail(None, None);
    }
    let feedback_span = (fb_start, i);
    i += 1;
    let reason_start = i;
    while i < body.len() && !vocab.is_structural(body[i]) {
        i += 1;
    }
    if body.get(i) != Some(&vocab.thinking_close()) {
        return fail(Some(feedback_span), None);
    }
    let reasoning_span = (reason_start, i);
    i += 1;
    if body.get(i) != Some(&vocab.box_marker()) {
        return fail(Some(feedback_span), Some(reasoning_span));
    }
    i += 1;
    let ans_start = i;
    while i < body.len() && !vocab.is_structural(body[i]) {
        i += 1;
    }
    if i != body.len() || i == ans_start {
        // Either a stray structural tag in the answer region, or no answer.
        return fail(Some(feedback_span), Some(reasoning_span));
    }
    StructuredResponse {
        feedback_span: Some(feedback_span),
        reasoning_span: Some(reasoning_span),
        answer: Some(body[ans_start..].to_vec()),
        format_ok: true,
    }
}

/// Binary verifiable reward: 1 iff the response is format-compliant and the
/// parsed answer equals the ground truth exactly.
pub fn verify(problem: &ProblemInstance, response: &StructuredResponse) -> VerifierOutcome {
    let answer_ok = response
        .answer
        .as_deref()
        .is_some_and(|a| check_answer(problem, a));
    let reward = (response.format_ok && answer_ok) as u8;
    VerifierOutcome {
        reward,
        format_ok: response.format_ok,
        answer_ok,
    }
}

/// Verifies whole rollout groups. The production implementation parses each
/// rollout against the schema; tests substitute pattern-driven mocks.
pub trait Verifier: Send + Sync {
    fn verify_rollout(&self, problem: &ProblemInstance, tokens: &[TokenId]) -> VerifierOutcome;

    fn verify_group(
        &self,
        problem: &ProblemInstance,
        group: &[Vec<TokenId>],
    ) -> Vec<VerifierOutcome> {
        group
            .iter()
            .map(|t| self.verify_rollout(problem, t))
            .collect()
    }
}

/// The rule-based verifier: schema parse plus exact answer check.
#[derive(Debug, Clone)]
pub struct SchemaVerifier {
    vocab: Vocab,
}

impl SchemaVerifier {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }
}

impl Verifier for SchemaVerifier {
    fn verify_rollout(&self, problem: &ProblemInstance, tokens: &[TokenId]) -> VerifierOutcome {
        verify(problem, &parse_response(tokens, &self.vocab))
    }
}

/// Everything needed to regenerate conditioned on injected feedback: the
/// context whose bag carries the feedback tokens, the exact forced prefix
/// the rollout must begin with, and the span to exclude from every loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RegenContext {
    pub ctx: Context,
    pub forced_prefix: ForcedPrefix,
    pub masked_span: (usize, usize),
    /// Set when the feedback exceeded the cap and was truncated.
    pub truncated: bool,
}

/// Builds the regeneration context for turn t ≥ 1.
///
/// The forced prefix is `<thinking> <feedback> f </feedback>`; it is
/// teacher-forced and fully masked, so externally injected tokens never
/// contribute to any loss. Feedback longer than `feedback_cap` is truncated
/// rather than rejected (simulator output length is not under the trainer's
/// control) and the truncation is flagged.
pub fn build_regeneration_context(
    problem: &ProblemInstance,
    feedback: &FeedbackText,
    feedback_cap: usize,
    vocab: &Vocab,
) -> Result<RegenContext, SchemaError> {
    if feedback.tokens.is_empty() {
        return Err(SchemaError::EmptyFeedback);
    }
    let truncated = feedback.tokens.len() > feedback_cap;
    let fb: Vec<TokenId> = feedback.tokens.iter().copied().take(feedback_cap).collect();

    let mut prefix = Vec::with_capacity(fb.len() + 3);
    prefix.push(vocab.thinking_open());
    prefix.push(vocab.feedback_open());
    prefix.extend_from_slice(&fb);
    prefix.push(vocab.feedback_close());
    let masked_span = (0, prefix.len());

    Ok(RegenContext {
        ctx: Context::with_feedback(problem.prompt_tokens.clone(), fb),
        forced_prefix: ForcedPrefix {
            tokens: prefix,
            masked_span,
        },
        masked_span,
        truncated,
    })
}

/// Assembles a schema-valid token sequence from its content parts. Used by
/// tests and transcripts; the inverse of [`parse_response`] on valid input.
pub fn build_response_tokens(
    feedback: &[TokenId],
    reasoning: &[TokenId],
    answer: &[TokenId],
    vocab: &Vocab,
) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(feedback.len() + reasoning.len() + answer.len() + 6);
    out.push(vocab.thinking_open());
    out.push(vocab.feedback_open());
    out.extend_from_slice(feedback);
    out.push(vocab.feedback_close());
    out.extend_from_slice(reasoning);
    out.push(vocab.thinking_close());
    out.push(vocab.box_marker());
    out.extend_from_slice(answer);
    out.push(vocab.eos());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Op;
    use crate::feedback::{FeedbackSource, FeedbackText};

    fn vocab() -> Vocab {
        Vocab::standard()
    }

    fn ids(v: &Vocab, toks: &[&str]) -> Vec<TokenId> {
        toks.iter().map(|t| v.id(t).unwrap()).collect()
    }

    #[test]
    fn minimal_valid_response_parses() {
        let v = vocab();
        let toks = ids(
            &v,
            &[
                "<thinking>",
                "<feedback>",
                "H1",
                "</feedback>",
                "issue",
                "</thinking>",
                "<box>",
                "5",
                "<eos>",
            ],
        );
        let r = parse_response(&toks, &v);
        assert!(r.format_ok);
        assert_eq!(r.feedback_span, Some((2, 3)));
        assert_eq!(r.reasoning_span, Some((4, 5)));
        assert_eq!(r.answer, Some(vec![v.digit(5).unwrap()]));
    }

    #[test]
    fn empty_sequence_fails_format() {
        let v = vocab();
        let r = parse_response(&[], &v);
        assert!(!r.format_ok);
        assert!(r.answer.is_none());
    }

    #[test]
    fn double_feedback_block_fails() {
        let v = vocab();
        let toks = ids(
            &v,
            &[
                "<thinking>",
                "<feedback>",
                "H1",
                "</feedback>",
                "<feedback>",
                "H2",
                "</feedback>",
                "</thinking>",
                "<box>",
                "5",
            ],
        );
        assert!(!parse_response(&toks, &v).format_ok);
    }

    #[test]
    fn missing_thinking_close_fails() {
        let v = vocab();
        let toks = ids(
            &v,
            &["<thinking>", "<feedback>", "</feedback>", "<box>", "5"],
        );
        assert!(!parse_response(&toks, &v).format_ok);
    }

    #[test]
    fn empty_feedback_and_reasoning_are_tolerated() {
        let v = vocab();
        let toks = ids(
            &v,
            &[
                "<thinking>",
                "<feedback>",
                "</feedback>",
                "</thinking>",
                "<box>",
                "7",
            ],
        );
        let r = parse_response(&toks, &v);
        assert!(r.format_ok, "missing <eos> after a complete answer is fine");
        assert_eq!(r.feedback_span, Some((2, 2)));
        assert_eq!(r.reasoning_span, Some((3, 3)));
    }

    #[test]
    fn answer_must_be_present() {
        let v = vocab();
        let toks = ids(
            &v,
            &[
                "<thinking>",
                "<feedback>",
                "</feedback>",
                "</thinking>",
                "<box>",
                "<eos>",
            ],
        );
        assert!(!parse_response(&toks, &v).format_ok);
    }

    #[test]
    fn multi_token_answer_parses_but_fails_verification() {
        let v = vocab();
        let problem = ProblemInstance::new(0, 3, Op::Add, 4, &v);
        let toks = build_response_tokens(&[], &[], &ids(&v, &["7", "7"]), &v);
        let r = parse_response(&toks, &v);
        assert!(r.format_ok);
        let out = verify(&problem, &r);
        assert_eq!(out.reward, 0);
        assert!(!out.answer_ok);
    }

    #[test]
    fn verify_reward_factorizes() {
        let v = vocab();
        let problem = ProblemInstance::new(0, 3, Op::Add, 4, &v);

        let good = build_response_tokens(&[], &[], &[v.digit(7).unwrap()], &v);
        let out = verify(&problem, &parse_response(&good, &v));
        assert_eq!((out.reward, out.format_ok, out.answer_ok), (1, true, true));

        // Correct answer but missing </thinking>.
        let bad = ids(&v, &["<thinking>", "<feedback>", "</feedback>", "7"]);
        let out = verify(&problem, &parse_response(&bad, &v));
        assert_eq!(out.reward, 0);

        let wrong = build_response_tokens(&[], &[], &[v.digit(8).unwrap()], &v);
        let out = verify(&problem, &parse_response(&wrong, &v));
        assert_eq!((out.reward, out.format_ok, out.answer_ok), (0, true, false));
    }

    #[test]
    fn regeneration_context_shape() {
        let v = vocab();
        let problem = ProblemInstance::new(0, 2, Op::Mul, 3, &v);
        let fb = FeedbackText {
            tokens: ids(&v, &["issue", "H0", "fix"]),
            issue: "issue".into(),
            fix_steps: "fix".into(),
            source: FeedbackSource::Scripted,
        };
        let regen = build_regeneration_context(&problem, &fb, 16, &v).unwrap();
        assert_eq!(regen.forced_prefix.tokens.len(), 3 + 3); // content + 3 tags
        assert_eq!(regen.masked_span, (0, 6));
        assert!(!regen.truncated);
        assert_eq!(
            regen.ctx.injected_feedback.as_deref(),
            Some(&ids(&v, &["issue", "H0", "fix"])[..])
        );

        // Same feedback twice -> identical prefix.
        let regen2 = build_regeneration_context(&problem, &fb, 16, &v).unwrap();
        assert_eq!(regen.forced_prefix, regen2.forced_prefix);
    }

    #[test]
    fn over_cap_feedback_truncates_with_flag() {
        let v = vocab();
        let problem = ProblemInstance::new(0, 2, Op::Mul, 3, &v);
        let fb = FeedbackText {
            tokens: vec![v.id("issue").unwrap(); 10],
            issue: String::new(),
            fix_steps: String::new(),
            source: FeedbackSource::Scripted,
        };
        let regen = build_regeneration_context(&problem, &fb, 4, &v).unwrap();
        assert!(regen.truncated);
        assert_eq!(regen.forced_prefix.tokens.len(), 4 + 3);
        assert_eq!(
            build_regeneration_context(
                &problem,
                &FeedbackText {
                    tokens: vec![],
                    issue: String::new(),
                    fix_steps: String::new(),
                    source: FeedbackSource::Scripted,
                },
                4,
                &v
            )
            .unwrap_err(),
            SchemaError::EmptyFeedback
        );
    }

    #[test]
    fn reconstruction_round_trips_spans() {
        let v = vocab();
        let fb = ids(&v, &["issue", "H2"]);
        let reasoning = ids(&v, &["fix", "1", "2"]);
        let answer = vec![v.digit(4).unwrap()];
        let toks = build_response_tokens(&fb, &reasoning, &answer, &v);
        let r = parse_response(&toks, &v);
        assert!(r.format_ok);
        assert_eq!(r.feedback_span, Some((2, 2 + fb.len())));
        let reason_start = 2 + fb.len() + 1;
        assert_eq!(
            r.reasoning_span,
            Some((reason_start, reason_start + reasoning.len()))
        );
        assert_eq!(r.answer, Some(answer));
    }
}

//! Log-linear sequence policy with exact sampling, exact log-probabilities
//! and closed-form gradients.
//!
//! The next-token logit conditions on the previous token (order-1 transition
//! table) and on the bag of context tokens (prompt plus injected feedback):
//!
//! ```text
//! logits(next | prev, ctx) = w_trans[prev, next] + Σ_{u ∈ bag(ctx)} w_ctx[u, next]
//! ```
//!
//! The bag term is what lets injected feedback measurably change
//! regeneration: a hint token in the context shifts every position's logits
//! by its `w_ctx` row. Sampling may use any temperature, but log-probs used
//! for training are always evaluated at temperature 1. All arithmetic is
//! f64; gradient paths are checked against central finite differences.

use crate::vocab::{TokenId, Vocab};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("unknown token id {id} at position {position}")]
    UnknownToken { position: usize, id: TokenId },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("mask length {mask_len} does not match sequence length {seq_len}")]
    MaskLengthMismatch { mask_len: usize, seq_len: usize },
}

/// Dense row-major f64 matrix. Small enough here that nothing fancier pays off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add_scaled(&mut self, other: &Mat, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense parameter tables of the log-linear policy.
///
/// `w_trans` has `V + 1` rows: rows `0..V` are indexed by the previous token
/// and the extra row `V` is the reserved begin-of-sequence row (not a vocab
/// token, the policy can never emit it). `w_ctx` is `V × V`, indexed by
/// context-bag token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w_trans: Mat,
    pub w_ctx: Mat,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            w_trans: Mat::zeros(vocab_size + 1, vocab_size),
            w_ctx: Mat::zeros(vocab_size, vocab_size),
        }
    }

    /// Initialization that already follows the output schema: strong logits
    /// along the skeleton `<thinking> <feedback> </feedback> </thinking>
    /// <box> digit <eos>` and a flat ten-way choice among the digits at the
    /// answer slot. `w_ctx` starts at zero, so everything the tasks can teach
    /// (digit preferences given prompt or hint tokens) is still to be learned.
    pub fn schema_primed(vocab: &Vocab) -> Self {
        const STRONG: f64 = 12.0;
        let v = vocab.size();
        let mut p = Self::zeros(v);
        // Default every row (including rows never visited by the greedy
        // skeleton) to "close the sequence" so truncation stays rare.
        for r in 0..=v {
            for c in 0..v {
                p.w_trans
                    .set(r, c, if c == vocab.eos() { STRONG } else { 0.0 });
            }
        }
        let bos = p.bos_row();
        let mut force = |row: usize, next: TokenId| {
            for c in 0..v {
                p.w_trans.set(row, c, if c == next { STRONG } else { 0.0 });
            }
        };
        force(bos, vocab.thinking_open());
        force(vocab.thinking_open(), vocab.feedback_open());
        force(vocab.feedback_open(), vocab.feedback_close());
        force(vocab.feedback_close(), vocab.thinking_close());
        force(vocab.thinking_close(), vocab.box_marker());
        // Answer slot: digits tied at zero, everything else strongly
        // suppressed. Ten-way uniform at temperature 1, lowest-index digit
        // under greedy.
        for c in 0..v {
            let is_digit = (0..10).any(|d| vocab.digit(d) == Some(c));
            p.w_trans
                .set(vocab.box_marker(), c, if is_digit { 0.0 } else { -STRONG });
        }
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.w_ctx.rows()
    }

    /// Row of `w_trans` used when there is no previous token.
    pub fn bos_row(&self) -> usize {
        self.vocab_size()
    }

    pub fn is_finite(&self) -> bool {
        self.w_trans.is_finite() && self.w_ctx.is_finite()
    }
}

/// Turn-specific conditioning context: the prompt, plus the externally
/// injected feedback tokens when the turn index is ≥ 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub prompt_tokens: Vec<TokenId>,
    pub injected_feedback: Option<Vec<TokenId>>,
}

impl Context {
    pub fn initial(prompt_tokens: Vec<TokenId>) -> Self {
        Self {
            prompt_tokens,
            injected_feedback: None,
        }
    }

    pub fn with_feedback(prompt_tokens: Vec<TokenId>, feedback: Vec<TokenId>) -> Self {
        Self {
            prompt_tokens,
            injected_feedback: Some(feedback),
        }
    }

    /// Multiset of context tokens as (token, multiplicity) pairs, ordered by
    /// token id so downstream accumulation is deterministic.
    pub fn bag_counts(&self, vocab_size: usize) -> Vec<(TokenId, f64)> {
        let mut counts = vec![0usize; vocab_size];
        for &t in self
            .prompt_tokens
            .iter()
            .chain(self.injected_feedback.iter().flatten())
        {
            counts[t] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .map(|(t, c)| (t, c as f64))
            .collect()
    }

    fn validate(&self, vocab_size: usize) -> Result<(), PolicyError> {
        for (position, &t) in self
            .prompt_tokens
            .iter()
            .chain(self.injected_feedback.iter().flatten())
            .enumerate()
        {
            if t >= vocab_size {
                return Err(PolicyError::UnknownToken { position, id: t });
            }
        }
        Ok(())
    }
}

/// One sampled response: tokens, per-token log-probs under the policy that
/// sampled it (at temperature 1), the loss mask, and the verifier reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    pub token_logprobs: Vec<f64>,
    /// true = the position participates in losses. Injected feedback spans
    /// (turn ≥ 1) are false.
    pub loss_mask: Vec<bool>,
    /// Binary verifier reward, set after verification.
    pub reward: u8,
    /// True when the sequence hit the length cap without emitting `<eos>`.
    pub truncated: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unmasked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

/// Sum of the context-bag rows: the position-independent additive part of
/// every logit vector under `ctx`.
pub fn context_bias(params: &PolicyParams, ctx: &Context) -> Vec<f64> {
    let v = params.vocab_size();
    let mut bias = vec![0.0; v];
    for (u, count) in ctx.bag_counts(v) {
        let row = params.w_ctx.row(u);
        for (b, w) in bias.iter_mut().zip(row) {
            *b += count * w;
        }
    }
    bias
}

/// Raw next-token logits given the previous token (`None` = sequence start).
pub fn logits(params: &PolicyParams, ctx: &Context, prev: Option<TokenId>) -> Vec<f64> {
    let bias = context_bias(params, ctx);
    logits_with_bias(params, &bias, prev)
}

fn logits_with_bias(params: &PolicyParams, bias: &[f64], prev: Option<TokenId>) -> Vec<f64> {
    let row = params.w_trans.row(prev.unwrap_or(params.bos_row()));
    row.iter().zip(bias).map(|(a, b)| a + b).collect()
}

/// Numerically stable log-softmax.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_z).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|l| l.exp()).collect()
}

/// Spec for teacher-forced prefixes: the rollout must begin with exactly
/// these tokens; positions inside `masked_span` get `loss_mask = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedPrefix {
    pub tokens: Vec<TokenId>,
    pub masked_span: (usize, usize),
}

/// Samples a rollout autoregressively from `softmax(logits / temperature)`.
///
/// Token log-probs are recorded at temperature 1 regardless of the sampling
/// temperature. Hitting `max_len` without `<eos>` is a valid outcome, flagged
/// as truncated.
pub fn sample_rollout<R: Rng>(
    params: &PolicyParams,
    ctx: &Context,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
    vocab: &Vocab,
) -> Rollout {
    sample_rollout_with_prefix(params, ctx, None, max_len, temperature, rng, vocab)
}

/// As [`sample_rollout`], but teacher-forces `prefix` first. Forced positions
/// are never sampled; their temperature-1 log-probs are still recorded.
pub fn sample_rollout_with_prefix<R: Rng>(
    params: &PolicyParams,
    ctx: &Context,
    prefix: Option<&ForcedPrefix>,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
    vocab: &Vocab,
) -> Rollout {
    assert!(max_len >= 1, "max_len must be at least 1");
    assert!(temperature > 0.0, "temperature must be positive");
    let bias = context_bias(params, ctx);
    let eos = vocab.eos();

    let mut tokens: Vec<TokenId> = Vec::with_capacity(max_len);
    let mut logprobs: Vec<f64> = Vec::with_capacity(max_len);
    let mut mask: Vec<bool> = Vec::with_capacity(max_len);

    if let Some(p) = prefix {
        for (j, &tok) in p.tokens.iter().take(max_len).enumerate() {
            let prev = if j == 0 { None } else { Some(p.tokens[j - 1]) };
            let lsm = log_softmax(&logits_with_bias(params, &bias, prev));
            tokens.push(tok);
            logprobs.push(lsm[tok]);
            mask.push(!(j >= p.masked_span.0 && j < p.masked_span.1));
        }
    }

    let mut ended = tokens.last() == Some(&eos);
    while !ended && tokens.len() < max_len {
        let prev = tokens.last().copied();
        let raw = logits_with_bias(params, &bias, prev);
        let lsm = log_softmax(&raw);
        let tempered: Vec<f64> = raw.iter().map(|l| l / temperature).collect();
        let probs = softmax(&tempered);
        let tok = sample_index(&probs, rng);
        tokens.push(tok);
        logprobs.push(lsm[tok]);
        mask.push(true);
        ended = tok == eos;
    }

    Rollout {
        tokens,
        token_logprobs: logprobs,
        loss_mask: mask,
        reward: 0,
        truncated: !ended,
    }
}

/// Deterministic argmax decode, used by evaluation and test-time inference.
/// Ties break toward the lowest token index.
pub fn greedy_rollout(
    params: &PolicyParams,
    ctx: &Context,
    prefix: Option<&ForcedPrefix>,
    max_len: usize,
    vocab: &Vocab,
) -> Rollout {
    assert!(max_len >= 1, "max_len must be at least 1");
    let bias = context_bias(params, ctx);
    let eos = vocab.eos();

    let mut tokens: Vec<TokenId> = Vec::with_capacity(max_len);
    let mut logprobs: Vec<f64> = Vec::with_capacity(max_len);
    let mut mask: Vec<bool> = Vec::with_capacity(max_len);

    if let Some(p) = prefix {
        for (j, &tok) in p.tokens.iter().take(max_len).enumerate() {
            let prev = if j == 0 { None } else { Some(p.tokens[j - 1]) };
            let lsm = log_softmax(&logits_with_bias(params, &bias, prev));
            tokens.push(tok);
            logprobs.push(lsm[tok]);
            mask.push(!(j >= p.masked_span.0 && j < p.masked_span.1));
        }
    }

    let mut ended = tokens.last() == Some(&eos);
    while !ended && tokens.len() < max_len {
        let prev = tokens.last().copied();
        let lsm = log_softmax(&logits_with_bias(params, &bias, prev));
        let tok = lsm
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.total_cmp(b))
            .map(|(i, _)| i)
            .unwrap();
        tokens.push(tok);
        logprobs.push(lsm[tok]);
        mask.push(true);
        ended = tok == eos;
    }

    Rollout {
        tokens,
        token_logprobs: logprobs,
        loss_mask: mask,
        reward: 0,
        truncated: !ended,
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Total and per-token log-probability of `tokens` under `params` and `ctx`,
/// at temperature 1.
pub fn log_prob(
    params: &PolicyParams,
    ctx: &Context,
    tokens: &[TokenId],
) -> Result<(f64, Vec<f64>), PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptySequence);
    }
    let v = params.vocab_size();
    ctx.validate(v)?;
    for (position, &t) in tokens.iter().enumerate() {
        if t >= v {
            return Err(PolicyError::UnknownToken { position, id: t });
        }
    }
    let bias = context_bias(params, ctx);
    let mut per_token = Vec::with_capacity(tokens.len());
    for (j, &tok) in tokens.iter().enumerate() {
        let prev = if j == 0 { None } else { Some(tokens[j - 1]) };
        let lsm = log_softmax(&logits_with_bias(params, &bias, prev));
        per_token.push(lsm[tok]);
    }
    Ok((per_token.iter().sum(), per_token))
}

/// Gradient tables, same shapes as [`PolicyParams`]. Accumulators are
/// merged by summation; merge order only reassociates floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum {
    pub w_trans: Mat,
    pub w_ctx: Mat,
}

impl GradAccum {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            w_trans: Mat::zeros(vocab_size + 1, vocab_size),
            w_ctx: Mat::zeros(vocab_size, vocab_size),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w_ctx.rows()
    }

    pub fn merge(&mut self, other: &GradAccum) {
        self.w_trans.add_scaled(&other.w_trans, 1.0);
        self.w_ctx.add_scaled(&other.w_ctx, 1.0);
    }

    pub fn add_scaled(&mut self, other: &GradAccum, scale: f64) {
        self.w_trans.add_scaled(&other.w_trans, scale);
        self.w_ctx.add_scaled(&other.w_ctx, scale);
    }

    pub fn scale(&mut self, s: f64) {
        self.w_trans.scale(s);
        self.w_ctx.scale(s);
    }

    pub fn max_abs(&self) -> f64 {
        self.w_trans.max_abs().max(self.w_ctx.max_abs())
    }

    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }

    /// Routes a d(loss)/d(logits) vector at one position into both tables:
    /// the transition row of the previous token gets it once, each distinct
    /// bag row gets it multiplicity-weighted.
    fn add_dlogits(
        &mut self,
        prev_row: usize,
        bag: &[(TokenId, f64)],
        dlogits: &[f64],
        scale: f64,
    ) {
        let row = self.w_trans.row_mut(prev_row);
        for (g, d) in row.iter_mut().zip(dlogits) {
            *g += scale * d;
        }
        for &(u, count) in bag {
            let row = self.w_ctx.row_mut(u);
            for (g, d) in row.iter_mut().zip(dlogits) {
                *g += scale * count * d;
            }
        }
    }
}

/// Gradient of `Σ_{j: mask[j]} log π(tokens[j] | ·)` w.r.t. both tables.
///
/// Per unmasked position the transition-row gradient is `onehot − softmax`
/// and every context-bag row receives the same vector, weighted by its
/// multiplicity in the bag.
pub fn grad_log_prob(
    params: &PolicyParams,
    ctx: &Context,
    tokens: &[TokenId],
    mask: &[bool],
) -> Result<GradAccum, PolicyError> {
    if mask.len() != tokens.len() {
        return Err(PolicyError::MaskLengthMismatch {
            mask_len: mask.len(),
            seq_len: tokens.len(),
        });
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut acc = GradAccum::zeros(params.vocab_size());
    accumulate_weighted_logprob_grad(params, ctx, tokens, &weights, &mut acc)?;
    Ok(acc)
}

/// Accumulates `Σ_j weights[j] · ∇ log π(tokens[j] | ·)` into `acc`.
/// A zero weight skips the position entirely.
pub fn accumulate_weighted_logprob_grad(
    params: &PolicyParams,
    ctx: &Context,
    tokens: &[TokenId],
    weights: &[f64],
    acc: &mut GradAccum,
) -> Result<(), PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptySequence);
    }
    if weights.len() != tokens.len() {
        return Err(PolicyError::MaskLengthMismatch {
            mask_len: weights.len(),
            seq_len: tokens.len(),
        });
    }
    let v = params.vocab_size();
    ctx.validate(v)?;
    for (position, &t) in tokens.iter().enumerate() {
        if t >= v {
            return Err(PolicyError::UnknownToken { position, id: t });
        }
    }
    let bias = context_bias(params, ctx);
    let bag = ctx.bag_counts(v);
    let mut dlogits = vec![0.0; v];
    for (j, &tok) in tokens.iter().enumerate() {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        let prev = if j == 0 { None } else { Some(tokens[j - 1]) };
        let prev_row = prev.unwrap_or(params.bos_row());
        let probs = softmax(&logits_with_bias(params, &bias, prev));
        for (d, p) in dlogits.iter_mut().zip(&probs) {
            *d = -p;
        }
        dlogits[tok] += 1.0;
        acc.add_dlogits(prev_row, &bag, &dlogits, w);
    }
    Ok(())
}

/// Mean token entropy over weighted positions and its gradient contribution.
/// Used only when the entropy coefficient is nonzero.
pub fn accumulate_entropy_grad(
    params: &PolicyParams,
    ctx: &Context,
    tokens: &[TokenId],
    weights: &[f64],
    acc: &mut GradAccum,
) -> Result<f64, PolicyError> {
    if weights.len() != tokens.len() {
        return Err(PolicyError::MaskLengthMismatch {
            mask_len: weights.len(),
            seq_len: tokens.len(),
        });
    }
    let v = params.vocab_size();
    ctx.validate(v)?;
    let bias = context_bias(params, ctx);
    let bag = ctx.bag_counts(v);
    let mut total = 0.0;
    let mut dlogits = vec![0.0; v];
    for (j, _) in tokens.iter().enumerate() {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        let prev = if j == 0 { None } else { Some(tokens[j - 1]) };
        let prev_row = prev.unwrap_or(params.bos_row());
        let lsm = log_softmax(&logits_with_bias(params, &bias, prev));
        let entropy: f64 = lsm.iter().map(|l| -l.exp() * l).sum();
        total += w * entropy;
        // dH/dz_k = -p_k (log p_k + H)
        for (d, l) in dlogits.iter_mut().zip(&lsm) {
            *d = -l.exp() * (l + entropy);
        }
        acc.add_dlogits(prev_row, &bag, &dlogits, w);
    }
    Ok(total)
}

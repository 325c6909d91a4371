//! Loss mathematics: reward-pattern classification, group-relative
//! advantages, the clipped surrogate with low-variance KL, the cross-turn
//! preference loss, and the piecewise per-prompt dispatch.
//!
//! Advantages normalize rewards within the group with a population standard
//! deviation: `A_i = (r_i − mean) / (std + δ)`. The surrogate uses a
//! sequence-level ratio `ρ_i = exp(Σ log π_θ − Σ log π_old)` over unmasked
//! tokens (a per-token ratio variant sits behind `token_level_ratio`) and
//! `min(ρ A, clip(ρ, 1−ε, 1+ε) A)`; under the default single update per
//! sample `ρ_i = 1` exactly and the clip branch is inert. The KL regularizer
//! is the low-variance per-token estimate `exp(u) − u − 1` with
//! `u = log π_ref − log π_θ`, averaged over the group's unmasked tokens.
//!
//! The cross-turn preference loss scores index-matched (regenerated winner,
//! previous-turn loser) pairs under the same feedback-augmented context:
//! `L = −(1/K) Σ log σ(β (Δ(w) − Δ(l)))` with `Δ(y) = log π_θ(y) −
//! log π_ref(y)` over unmasked tokens, reference frozen.

use crate::policy::{
    accumulate_entropy_grad, accumulate_weighted_logprob_grad, log_prob, Context, GradAccum,
    PolicyError, PolicyParams, Rollout,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObjectiveError {
    #[error("empty reward vector")]
    EmptyRewards,
    #[error("group of size {0} has no within-group contrast; need K >= 2")]
    GroupTooSmall(usize),
    #[error("expected a {expected} group, got {got}")]
    PatternContract {
        expected: &'static str,
        got: &'static str,
    },
    #[error("pair count mismatch: {winners} winners vs {losers} losers")]
    PairLengthMismatch { winners: usize, losers: usize },
    #[error("preference pair contract violated: winners must have reward 1 and losers reward 0")]
    PairRewardContract,
    #[error("advantage vector length {advantages} does not match group size {group}")]
    AdvantageLengthMismatch { advantages: usize, group: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Reward pattern of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupPattern {
    AllFail,
    AllPos,
    Mixed,
}

impl GroupPattern {
    pub fn name(self) -> &'static str {
        match self {
            GroupPattern::AllFail => "all_fail",
            GroupPattern::AllPos => "all_pos",
            GroupPattern::Mixed => "mixed",
        }
    }
}

pub fn classify_pattern(rewards: &[u8]) -> Result<GroupPattern, ObjectiveError> {
    if rewards.is_empty() {
        return Err(ObjectiveError::EmptyRewards);
    }
    let positives = rewards.iter().filter(|&&r| r != 0).count();
    Ok(if positives == 0 {
        GroupPattern::AllFail
    } else if positives == rewards.len() {
        GroupPattern::AllPos
    } else {
        GroupPattern::Mixed
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    /// Clip width ε of the surrogate.
    #[serde(default = "defaults::clip_eps")]
    pub clip_eps: f64,
    /// KL coefficient β_KL.
    #[serde(default = "defaults::kl_coef")]
    pub kl_coef: f64,
    /// δ added to the advantage denominator.
    #[serde(default = "defaults::adv_denom_eps")]
    pub adv_denom_eps: f64,
    /// Entropy bonus coefficient (0 disables the term).
    #[serde(default)]
    pub entropy_coef: f64,
    /// Use the per-token ratio variant instead of the sequence-level ratio.
    #[serde(default)]
    pub token_level_ratio: bool,
}

mod defaults {
    pub fn clip_eps() -> f64 {
        0.2
    }
    pub fn kl_coef() -> f64 {
        0.001
    }
    pub fn adv_denom_eps() -> f64 {
        1e-6
    }
    pub fn dpo_beta() -> f64 {
        0.005
    }
    pub fn dpo_lambda() -> f64 {
        0.01
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.001,
            adv_denom_eps: 1e-6,
            entropy_coef: 0.0,
            token_level_ratio: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(format!(
                "grpo.clip_eps must be in (0, 1), got {}",
                self.clip_eps
            ));
        }
        if self.kl_coef < 0.0 {
            return Err(format!("grpo.kl_coef must be >= 0, got {}", self.kl_coef));
        }
        if self.adv_denom_eps <= 0.0 {
            return Err(format!(
                "grpo.adv_denom_eps must be > 0, got {}",
                self.adv_denom_eps
            ));
        }
        if self.entropy_coef < 0.0 {
            return Err(format!(
                "grpo.entropy_coef must be >= 0, got {}",
                self.entropy_coef
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    /// Preference temperature β.
    #[serde(default = "defaults::dpo_beta")]
    pub beta: f64,
    /// Weight λ applied to the preference loss in the per-prompt dispatch.
    #[serde(default = "defaults::dpo_lambda")]
    pub lambda_weight: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.005,
            lambda_weight: 0.01,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beta <= 0.0 {
            return Err(format!("dpo.beta must be > 0, got {}", self.beta));
        }
        if self.lambda_weight <= 0.0 {
            return Err(format!(
                "dpo.lambda_weight must be > 0, got {}",
                self.lambda_weight
            ));
        }
        Ok(())
    }
}

/// Group-relative advantages: `(r_i − mean) / (population_std + δ)`.
pub fn grpo_advantages(rewards: &[f64], adv_denom_eps: f64) -> Result<Vec<f64>, ObjectiveError> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::GroupTooSmall(rewards.len()));
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
    let denom = var.sqrt() + adv_denom_eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Low-variance per-sample KL estimate: `exp(u) − u − 1` with
/// `u = logp_ref − logp_theta`. Nonnegative, zero iff the inputs match.
pub fn kl_low_var(logp_theta: f64, logp_ref: f64) -> f64 {
    let u = logp_ref - logp_theta;
    u.exp() - u - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Grpo,
    Dpo,
    Skip,
}

/// Diagnostics carried alongside each loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub advantages: Vec<f64>,
    pub ratios: Vec<f64>,
    pub kl_mean: f64,
    pub dpo_margins: Vec<f64>,
}

/// Per-prompt loss value, gradient and branch taken.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub branch: Branch,
    pub loss: f64,
    pub gradient: GradAccum,
    pub diagnostics: LossDiagnostics,
}

impl LossReport {
    pub fn skip(vocab_size: usize) -> Self {
        Self {
            branch: Branch::Skip,
            loss: 0.0,
            gradient: GradAccum::zeros(vocab_size),
            diagnostics: LossDiagnostics::default(),
        }
    }
}

/// Clipped group-relative surrogate plus KL regularizer over one mixed group.
///
/// Old-policy log-probs come from the rollouts (recorded when they were
/// sampled); current and reference log-probs are evaluated fresh. Masked
/// positions contribute nothing to ratios, KL, entropy or gradients.
pub fn grpo_loss(
    group: &[Rollout],
    ctx: &Context,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    advantages: &[f64],
    cfg: &GrpoConfig,
) -> Result<LossReport, ObjectiveError> {
    let rewards: Vec<u8> = group.iter().map(|r| r.reward).collect();
    let pattern = classify_pattern(&rewards)?;
    if pattern != GroupPattern::Mixed {
        return Err(ObjectiveError::PatternContract {
            expected: "mixed",
            got: pattern.name(),
        });
    }
    if advantages.len() != group.len() {
        return Err(ObjectiveError::AdvantageLengthMismatch {
            advantages: advantages.len(),
            group: group.len(),
        });
    }
    let k = group.len() as f64;
    let vocab_size = params.vocab_size();
    let mut grad = GradAccum::zeros(vocab_size);

    // Per-rollout fresh scores.
    let mut theta: Vec<Vec<f64>> = Vec::with_capacity(group.len());
    let mut reference: Vec<Vec<f64>> = Vec::with_capacity(group.len());
    for r in group {
        theta.push(log_prob(params, ctx, &r.tokens)?.1);
        reference.push(log_prob(ref_params, ctx, &r.tokens)?.1);
    }

    let total_unmasked: usize = group.iter().map(Rollout::unmasked_count).sum();

    let mut surrogate_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut ratios = Vec::with_capacity(group.len());
    // Per-rollout, per-token d(loss)/d(logp_theta) weights.
    let mut weights: Vec<Vec<f64>> = group.iter().map(|r| vec![0.0; r.tokens.len()]).collect();

    for (i, r) in group.iter().enumerate() {
        let a = advantages[i];
        let low = 1.0 - cfg.clip_eps;
        let high = 1.0 + cfg.clip_eps;

        if cfg.token_level_ratio {
            let n_i = r.unmasked_count();
            let mut seq_ratio_sum = 0.0;
            for j in 0..r.tokens.len() {
                if !r.loss_mask[j] {
                    continue;
                }
                let rho = (theta[i][j] - r.token_logprobs[j]).exp();
                let unclipped = rho * a;
                let clipped = rho.clamp(low, high) * a;
                seq_ratio_sum += rho;
                surrogate_sum += unclipped.min(clipped) / n_i.max(1) as f64;
                // Gradient flows only while the unclipped branch is selected
                // (ties included), matching min's one-sided derivative.
                if unclipped <= clipped {
                    weights[i][j] += -(a * rho) / (k * n_i.max(1) as f64);
                }
            }
            ratios.push(if n_i > 0 {
                seq_ratio_sum / n_i as f64
            } else {
                1.0
            });
        } else {
            let s_theta: f64 = sum_unmasked(&theta[i], &r.loss_mask);
            let s_old: f64 = sum_unmasked(&r.token_logprobs, &r.loss_mask);
            let rho = (s_theta - s_old).exp();
            let unclipped = rho * a;
            let clipped = rho.clamp(low, high) * a;
            surrogate_sum += unclipped.min(clipped);
            ratios.push(rho);
            if unclipped <= clipped {
                let w = -(a * rho) / k;
                for (weight, &live) in weights[i].iter_mut().zip(&r.loss_mask) {
                    if live {
                        *weight += w;
                    }
                }
            }
        }

        // KL term, masked identically to the surrogate.
        if cfg.kl_coef != 0.0 && total_unmasked > 0 {
            let scale = cfg.kl_coef / total_unmasked as f64;
            for j in 0..r.tokens.len() {
                if !r.loss_mask[j] {
                    continue;
                }
                let u = reference[i][j] - theta[i][j];
                kl_sum += u.exp() - u - 1.0;
                // d(exp(u) - u - 1)/d(logp_theta) = 1 - exp(u)
                weights[i][j] += scale * (1.0 - u.exp());
            }
        } else if total_unmasked > 0 {
            for j in 0..r.tokens.len() {
                if r.loss_mask[j] {
                    let u = reference[i][j] - theta[i][j];
                    kl_sum += u.exp() - u - 1.0;
                }
            }
        }
    }

    let kl_mean = if total_unmasked > 0 {
        kl_sum / total_unmasked as f64
    } else {
        0.0
    };
    let mut loss = -surrogate_sum / k + cfg.kl_coef * kl_mean;

    for (i, r) in group.iter().enumerate() {
        accumulate_weighted_logprob_grad(params, ctx, &r.tokens, &weights[i], &mut grad)?;
    }

    if cfg.entropy_coef != 0.0 && total_unmasked > 0 {
        let scale = -cfg.entropy_coef / total_unmasked as f64;
        let mut entropy_total = 0.0;
        for r in group {
            let w: Vec<f64> = r
                .loss_mask
                .iter()
                .map(|&m| if m { scale } else { 0.0 })
                .collect();
            // accumulate_entropy_grad returns Σ w_j H_j, already scaled.
            entropy_total += accumulate_entropy_grad(params, ctx, &r.tokens, &w, &mut grad)?;
        }
        loss += entropy_total;
    }

    Ok(LossReport {
        branch: Branch::Grpo,
        loss,
        gradient: grad,
        diagnostics: LossDiagnostics {
            advantages: advantages.to_vec(),
            ratios,
            kl_mean,
            dpo_margins: Vec::new(),
        },
    })
}

fn sum_unmasked(values: &[f64], mask: &[bool]) -> f64 {
    values
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| v)
        .sum()
}

/// Reference-relative total log-ratio of one rollout over unmasked tokens:
/// `Σ (log π_θ − log π_ref)`. Counterfactual scoring (a rollout from another
/// turn under this context) is allowed.
pub fn dpo_delta(
    y: &Rollout,
    ctx: &Context,
    params: &PolicyParams,
    ref_params: &PolicyParams,
) -> Result<f64, ObjectiveError> {
    if y.unmasked_count() == 0 {
        return Ok(0.0);
    }
    let (_, theta) = log_prob(params, ctx, &y.tokens)?;
    let (_, reference) = log_prob(ref_params, ctx, &y.tokens)?;
    Ok(sum_unmasked(&theta, &y.loss_mask) - sum_unmasked(&reference, &y.loss_mask))
}

/// Cross-turn preference loss over K index-matched pairs, both sides scored
/// under the current (feedback-augmented) context. Unscaled: the dispatch
/// applies the λ weight.
pub fn dpo_loss(
    winners: &[Rollout],
    losers: &[Rollout],
    ctx: &Context,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    cfg: &DpoConfig,
) -> Result<LossReport, ObjectiveError> {
    if winners.len() != losers.len() {
        return Err(ObjectiveError::PairLengthMismatch {
            winners: winners.len(),
            losers: losers.len(),
        });
    }
    if winners.is_empty() {
        return Err(ObjectiveError::EmptyRewards);
    }
    if winners.iter().any(|w| w.reward != 1) || losers.iter().any(|l| l.reward != 0) {
        return Err(ObjectiveError::PairRewardContract);
    }
    let k = winners.len() as f64;
    let vocab_size = params.vocab_size();
    let mut grad = GradAccum::zeros(vocab_size);
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(winners.len());

    for (w, l) in winners.iter().zip(losers) {
        let delta = dpo_delta(w, ctx, params, ref_params)? - dpo_delta(l, ctx, params, ref_params)?;
        margins.push(delta);
        let z = cfg.beta * delta;
        // -log sigma(z) = ln(1 + exp(-z)), computed stably.
        loss += if z > 0.0 {
            (-z).exp().ln_1p()
        } else {
            -z + z.exp().ln_1p()
        };
        // d(-log sigma(z))/d(delta) = -beta * sigma(-z)
        let coeff = -cfg.beta * sigmoid(-z) / k;
        let w_weights: Vec<f64> = w
            .loss_mask
            .iter()
            .map(|&m| if m { coeff } else { 0.0 })
            .collect();
        let l_weights: Vec<f64> = l
            .loss_mask
            .iter()
            .map(|&m| if m { -coeff } else { 0.0 })
            .collect();
        accumulate_weighted_logprob_grad(params, ctx, &w.tokens, &w_weights, &mut grad)?;
        accumulate_weighted_logprob_grad(params, ctx, &l.tokens, &l_weights, &mut grad)?;
    }
    loss /= k;

    Ok(LossReport {
        branch: Branch::Dpo,
        loss,
        gradient: grad,
        diagnostics: LossDiagnostics {
            advantages: Vec::new(),
            ratios: Vec::new(),
            kl_mean: 0.0,
            dpo_margins: margins,
        },
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Why a prompt produced no learning signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// All-positive at the initial turn: no contrast, no preference baseline.
    AllPosInitial,
    /// Still all-failed when the turn budget ran out.
    AllFailTerminal,
    /// The feedback simulator hard-failed after retries.
    SimulatorFailure,
}

/// The branch record produced by the turn loop for one prompt.
#[derive(Debug)]
pub enum BranchSelection<'a> {
    /// A mixed group at the optimized turn.
    Grpo {
        group: &'a [Rollout],
        ctx: &'a Context,
    },
    /// An all-positive regenerated group paired index-wise against the
    /// previous turn, both scored under the regeneration context.
    Dpo {
        winners: &'a [Rollout],
        losers: &'a [Rollout],
        ctx: &'a Context,
    },
    Skip {
        reason: SkipReason,
    },
}

/// Piecewise per-prompt dispatch: mixed → the group-relative loss,
/// regenerated all-positive → λ-weighted preference loss, everything else →
/// zero loss and zero gradient. Total over every reachable loop outcome.
pub fn per_prompt_loss(
    selection: &BranchSelection<'_>,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    grpo_cfg: &GrpoConfig,
    dpo_cfg: &DpoConfig,
) -> Result<LossReport, ObjectiveError> {
    match selection {
        BranchSelection::Grpo { group, ctx } => {
            let rewards: Vec<f64> = group.iter().map(|r| r.reward as f64).collect();
            let advantages = grpo_advantages(&rewards, grpo_cfg.adv_denom_eps)?;
            grpo_loss(group, ctx, params, ref_params, &advantages, grpo_cfg)
        }
        BranchSelection::Dpo {
            winners,
            losers,
            ctx,
        } => {
            let mut report = dpo_loss(winners, losers, ctx, params, ref_params, dpo_cfg)?;
            report.loss *= dpo_cfg.lambda_weight;
            report.gradient.scale(dpo_cfg.lambda_weight);
            Ok(report)
        }
        BranchSelection::Skip { .. } => Ok(LossReport::skip(params.vocab_size())),
    }
}

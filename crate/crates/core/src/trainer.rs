//! The per-prompt multi-turn state machine, mini-batch stepping, the
//! training driver and test-time multi-turn inference.
//!
//! Per prompt and step: sample a group of K rollouts, verify, classify.
//! All-positive at the initial turn skips (no contrast, no preference
//! baseline). Mixed groups take the group-relative update and terminate.
//! All-failed groups request aggregated feedback, regenerate conditioned on
//! it, and re-classify: all-positive after regeneration takes the cross-turn
//! preference update against the previous turn, mixed takes the
//! group-relative update, all-failed continues until the turn budget is
//! exhausted (zero loss). At most one optimized turn per prompt — the first
//! turn that yields an informative signal.
//!
//! Within a step the behavior policy is snapshotted once before any prompt
//! is processed; prompts are scored against the live parameters, so under
//! the default single update per sample every sequence ratio is exactly 1.
//! Prompts run in parallel with per-prompt derived seeds and gradients merge
//! in prompt order, so results do not depend on scheduling.

use crate::checkpoint::{self, TrainState};
use crate::env::{generate_dataset, DatasetSplit, ProblemInstance};
use crate::feedback::{
    aggregate_group_feedback, FeedbackError, FeedbackText, Simulator, SimulatorConfig,
};
use crate::metrics::{BranchCounts, MetricsWriter, StepMetrics};
use crate::objectives::{
    classify_pattern, per_prompt_loss, Branch, BranchSelection, DpoConfig, GroupPattern,
    GrpoConfig, LossReport, ObjectiveError, SkipReason,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{
    greedy_rollout, sample_rollout_with_prefix, Context, GradAccum, PolicyParams, Rollout,
};
use crate::schema::{
    build_regeneration_context, parse_response, SchemaError, SchemaVerifier, Verifier,
    VerifierOutcome,
};
use crate::vocab::{TokenId, Vocab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("another trainer holds the lock on {0} (pid {1})")]
    Locked(PathBuf, u32),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

/// Training mode. The three ablations map onto the components they disable:
/// `GrpoBaseline` turns regeneration off entirely, `NoDpo` keeps
/// regeneration but skips all-positive regenerated groups, `NoInjection`
/// appends the same feedback content to the prompt without a forced prefix
/// or masked span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Mulferl,
    GrpoBaseline,
    NoDpo,
    NoInjection,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Mulferl => "mulferl",
            RunMode::GrpoBaseline => "grpo-baseline",
            RunMode::NoDpo => "no-dpo",
            RunMode::NoInjection => "no-injection",
        }
    }
}

fn default_group_size() -> usize {
    8
}
fn default_max_turns() -> usize {
    2
}
fn default_batch_size() -> usize {
    16
}
fn default_micro_batch() -> usize {
    2
}
fn default_total_steps() -> u64 {
    400
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_prompt_len() -> usize {
    2048
}
fn default_max_response_len() -> usize {
    8192
}
fn default_max_feedback_len() -> usize {
    1024
}
fn default_simulator() -> SimulatorConfig {
    SimulatorConfig::scripted(2)
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

/// Hyperparameters of one training run. Serde defaults mirror the reference
/// setup; `learning_rate` must be given explicitly in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Turn budget T: total groups sampled per prompt, including the initial
    /// turn (T = 2 means one feedback-guided regeneration).
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_micro_batch")]
    pub micro_batch: usize,
    pub learning_rate: f64,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_prompt_len")]
    pub max_prompt_len: usize,
    #[serde(default = "default_max_response_len")]
    pub max_response_len: usize,
    #[serde(default = "default_max_feedback_len")]
    pub max_feedback_len: usize,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    /// Feedback-simulator settings; `feedback.endpoint` and
    /// `feedback.auth_env` configure the remote backend.
    #[serde(
        rename = "feedback",
        alias = "simulator",
        default = "default_simulator"
    )]
    pub simulator: SimulatorConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_mode")]
    pub mode: RunMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: default_group_size(),
            max_turns: default_max_turns(),
            batch_size: default_batch_size(),
            micro_batch: default_micro_batch(),
            learning_rate: 1e-6,
            total_steps: default_total_steps(),
            temperature: default_temperature(),
            max_prompt_len: default_max_prompt_len(),
            max_response_len: default_max_response_len(),
            max_feedback_len: default_max_feedback_len(),
            grpo: GrpoConfig::default(),
            dpo: DpoConfig::default(),
            simulator: default_simulator(),
            optimizer: default_optimizer(),
            seed: 0,
            mode: RunMode::Mulferl,
        }
    }
}

impl TrainConfig {
    fn default_mode() -> RunMode {
        RunMode::Mulferl
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.group_size < 2 {
            return fail(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.max_turns < 1 {
            return fail(format!("max_turns must be >= 1, got {}", self.max_turns));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.micro_batch < 1 || !self.batch_size.is_multiple_of(self.micro_batch) {
            return fail(format!(
                "micro_batch ({}) must divide batch_size ({})",
                self.micro_batch, self.batch_size
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.max_response_len < 1 {
            return fail("max_response_len must be >= 1".into());
        }
        if self.simulator.subgroup_size < 1 || self.simulator.subgroup_size > self.group_size {
            return fail(format!(
                "simulator.subgroup_size must be in 1..=group_size, got {}",
                self.simulator.subgroup_size
            ));
        }
        self.grpo.validate().or_else(&fail)?;
        self.dpo.validate().or_else(fail)?;
        Ok(())
    }
}

/// Per-prompt state of the turn loop.
#[derive(Debug, Clone)]
pub struct TurnState {
    pub t: usize,
    pub ctx: Context,
    pub group: Vec<Rollout>,
    pub pattern: GroupPattern,
    pub prev_group: Option<Vec<Rollout>>,
    pub feedback_history: Vec<FeedbackText>,
}

/// Observable outcome of one prompt's turn loop.
#[derive(Debug)]
pub struct PromptOutcome {
    pub loss_report: LossReport,
    pub turns_used: usize,
    pub pattern_trace: Vec<GroupPattern>,
    pub simulator_calls: usize,
    pub simulator_failed: bool,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless seed derivation, so resumed runs and parallel prompts draw the
/// same streams as sequential fresh runs.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

fn apply_outcomes(group: &mut [Rollout], outcomes: &[VerifierOutcome]) {
    for (r, o) in group.iter_mut().zip(outcomes) {
        r.reward = o.reward;
    }
}

/// Runs the full turn loop for one prompt and computes its loss report.
///
/// `old` is the behavior-policy snapshot used for sampling; `params` are the
/// live parameters the losses are scored against; `ref_params` is the frozen
/// reference. Simulator hard failures terminate the prompt with zero loss
/// and a diagnostic flag — training continues.
#[allow(clippy::too_many_arguments)]
pub fn run_prompt(
    problem: &ProblemInstance,
    params: &PolicyParams,
    old: &PolicyParams,
    ref_params: &PolicyParams,
    cfg: &TrainConfig,
    verifier: &dyn Verifier,
    simulator: &Simulator,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<PromptOutcome, TrainError> {
    let k = cfg.group_size;
    let turn_budget = match cfg.mode {
        RunMode::GrpoBaseline => 1,
        _ => cfg.max_turns,
    };

    let sample_group =
        |ctx: &Context, prefix: Option<&crate::policy::ForcedPrefix>, rng: &mut ChaCha8Rng| {
            (0..k)
                .map(|_| {
                    sample_rollout_with_prefix(
                        old,
                        ctx,
                        prefix,
                        cfg.max_response_len,
                        cfg.temperature,
                        rng,
                        vocab,
                    )
                })
                .collect::<Vec<Rollout>>()
        };

    let verify_group = |problem: &ProblemInstance, group: &mut Vec<Rollout>| {
        let tokens: Vec<Vec<TokenId>> = group.iter().map(|r| r.tokens.clone()).collect();
        let outcomes = verifier.verify_group(problem, &tokens);
        apply_outcomes(group, &outcomes);
    };

    let ctx = Context::initial(problem.prompt_tokens.clone());
    let mut group = sample_group(&ctx, None, rng);
    verify_group(problem, &mut group);
    let rewards: Vec<u8> = group.iter().map(|r| r.reward).collect();
    let mut state = TurnState {
        t: 0,
        ctx,
        pattern: classify_pattern(&rewards)?,
        group,
        prev_group: None,
        feedback_history: Vec::new(),
    };

    let mut trace = vec![state.pattern];
    let mut simulator_calls = 0usize;
    let mut simulator_failed = false;

    let finish = |selection: BranchSelection<'_>,
                  trace: Vec<GroupPattern>,
                  simulator_calls: usize,
                  simulator_failed: bool|
     -> Result<PromptOutcome, TrainError> {
        let loss_report = per_prompt_loss(&selection, params, ref_params, &cfg.grpo, &cfg.dpo)?;
        Ok(PromptOutcome {
            loss_report,
            turns_used: trace.len(),
            pattern_trace: trace,
            simulator_calls,
            simulator_failed,
        })
    };

    loop {
        match state.pattern {
            GroupPattern::AllPos => {
                if state.t == 0 || cfg.mode == RunMode::NoDpo {
                    // Initial-turn all-positive: nothing to contrast, no
                    // preference baseline. The no-dpo ablation treats every
                    // all-positive group this way.
                    return finish(
                        BranchSelection::Skip {
                            reason: SkipReason::AllPosInitial,
                        },
                        trace,
                        simulator_calls,
                        simulator_failed,
                    );
                }
                let winners = &state.group;
                let losers = state
                    .prev_group
                    .as_ref()
                    .expect("t >= 1 has a previous group");
                return finish(
                    BranchSelection::Dpo {
                        winners,
                        losers,
                        ctx: &state.ctx,
                    },
                    trace,
                    simulator_calls,
                    simulator_failed,
                );
            }
            GroupPattern::Mixed => {
                return finish(
                    BranchSelection::Grpo {
                        group: &state.group,
                        ctx: &state.ctx,
                    },
                    trace,
                    simulator_calls,
                    simulator_failed,
                );
            }
            GroupPattern::AllFail => {
                if state.t + 1 >= turn_budget {
                    return finish(
                        BranchSelection::Skip {
                            reason: SkipReason::AllFailTerminal,
                        },
                        trace,
                        simulator_calls,
                        simulator_failed,
                    );
                }
                let aggregated =
                    match aggregate_group_feedback(simulator, problem, &state.group, rng) {
                        Ok(a) => a,
                        Err(e) if e.is_contract_violation() => return Err(e.into()),
                        Err(_) => {
                            simulator_failed = true;
                            return finish(
                                BranchSelection::Skip {
                                    reason: SkipReason::SimulatorFailure,
                                },
                                trace,
                                simulator_calls,
                                simulator_failed,
                            );
                        }
                    };
                simulator_calls += aggregated.calls;

                let (next_ctx, prefix) = regeneration_inputs(
                    cfg.mode,
                    problem,
                    &aggregated.feedback,
                    cfg.max_feedback_len,
                    vocab,
                )?;

                let mut next_group = sample_group(&next_ctx, prefix.as_ref(), rng);
                verify_group(problem, &mut next_group);
                let rewards: Vec<u8> = next_group.iter().map(|r| r.reward).collect();
                let pattern = classify_pattern(&rewards)?;
                trace.push(pattern);

                state.prev_group = Some(std::mem::take(&mut state.group));
                state.feedback_history.push(aggregated.feedback);
                state.t += 1;
                state.ctx = next_ctx;
                state.group = next_group;
                state.pattern = pattern;
            }
        }
    }
}

/// Context and forced prefix for a feedback-guided turn. Under the
/// no-injection ablation the same feedback content is appended to the
/// prompt instead: no forced prefix and no masked span, so every sampled
/// position trains.
pub fn regeneration_inputs(
    mode: RunMode,
    problem: &ProblemInstance,
    feedback: &FeedbackText,
    feedback_cap: usize,
    vocab: &Vocab,
) -> Result<(Context, Option<crate::policy::ForcedPrefix>), TrainError> {
    if mode == RunMode::NoInjection {
        let mut prompt = problem.prompt_tokens.clone();
        prompt.extend(feedback.tokens.iter().copied().take(feedback_cap));
        Ok((Context::initial(prompt), None))
    } else {
        let regen = build_regeneration_context(problem, feedback, feedback_cap, vocab)?;
        Ok((regen.ctx, Some(regen.forced_prefix)))
    }
}

/// Step-level metrics plus the merged gradient bookkeeping.
pub struct StepResult {
    pub metrics: StepMetrics,
    pub outcomes: Vec<PromptOutcome>,
}

/// The training engine: owns parameters, reference, optimizer and the
/// verifier/simulator pair.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub optimizer: Optimizer,
    pub verifier: Box<dyn Verifier>,
    pub simulator: Simulator,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocab, params: PolicyParams) -> Result<Self, TrainError> {
        cfg.validate()?;
        let simulator = Simulator::new(cfg.simulator.clone(), vocab.clone())?;
        let optimizer = Optimizer::new(cfg.optimizer, vocab.size());
        Ok(Self {
            verifier: Box::new(SchemaVerifier::new(vocab.clone())),
            ref_params: params.clone(),
            simulator,
            optimizer,
            cfg,
            vocab,
            params,
            step: 0,
        })
    }

    /// One optimization step over a batch of prompts: snapshot the behavior
    /// policy, run every prompt's turn loop (in parallel, seeds derived per
    /// prompt), merge non-skip gradients in prompt order, normalize by the
    /// count of contributing prompts, and apply one optimizer update.
    pub fn run_step(&mut self, batch: &[&ProblemInstance]) -> Result<StepResult, TrainError> {
        let start = Instant::now();
        let old = self.params.clone();
        let step = self.step;
        let cfg = &self.cfg;
        let params = &self.params;
        let ref_params = &self.ref_params;
        let verifier: &dyn Verifier = self.verifier.as_ref();
        let simulator = &self.simulator;
        let vocab = &self.vocab;

        let outcomes: Vec<Result<PromptOutcome, TrainError>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, problem)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[0x5052_4f4d_5054, step, i as u64],
                ));
                run_prompt(
                    problem, params, &old, ref_params, cfg, verifier, simulator, vocab, &mut rng,
                )
            })
            .collect();
        let outcomes: Vec<PromptOutcome> = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

        // Merge gradients micro-batch by micro-batch, in prompt order.
        let mut grad = GradAccum::zeros(self.vocab.size());
        let mut contributing = 0usize;
        for chunk in outcomes.chunks(self.cfg.micro_batch) {
            let mut chunk_grad = GradAccum::zeros(self.vocab.size());
            for o in chunk {
                if o.loss_report.branch != Branch::Skip {
                    chunk_grad.merge(&o.loss_report.gradient);
                    contributing += 1;
                }
            }
            grad.merge(&chunk_grad);
        }

        let updated = contributing > 0;
        if updated {
            grad.scale(1.0 / contributing as f64);
            self.optimizer
                .step(&mut self.params, &grad, self.cfg.learning_rate);
        }

        let mut counts = BranchCounts::default();
        let mut grpo_losses = Vec::new();
        let mut dpo_losses = Vec::new();
        let mut regen_per_turn = vec![0usize; self.cfg.max_turns.saturating_sub(1)];
        let mut simulator_calls = 0;
        let mut simulator_failures = 0;
        for o in &outcomes {
            match o.loss_report.branch {
                Branch::Grpo => {
                    counts.grpo += 1;
                    grpo_losses.push(o.loss_report.loss);
                }
                Branch::Dpo => {
                    counts.dpo += 1;
                    dpo_losses.push(o.loss_report.loss);
                }
                Branch::Skip => {
                    // All-positive skips vs all-failed/simulator skips.
                    if o.pattern_trace.last() == Some(&GroupPattern::AllPos) {
                        counts.skip_allpos += 1;
                    } else {
                        counts.skip_allfail += 1;
                    }
                }
            }
            simulator_calls += o.simulator_calls;
            simulator_failures += o.simulator_failed as usize;
            for t in 1..o.turns_used {
                regen_per_turn[t - 1] += 1;
            }
        }

        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let metrics = StepMetrics {
            step: self.step,
            branch_counts: counts,
            mean_loss_grpo: mean(&grpo_losses),
            mean_loss_dpo: mean(&dpo_losses),
            regen_per_turn,
            simulator_calls,
            simulator_failures,
            updated,
            val_solve_rate: None,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(StepResult { metrics, outcomes })
    }
}

/// Deterministic batch schedule: a fresh seeded permutation of the train
/// split per epoch, read as a flat stream. A pure function of (seed, step),
/// so resumed runs pick up exactly where they left off.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n_train: usize) -> Vec<usize> {
    assert!(n_train > 0);
    let mut out = Vec::with_capacity(batch_size);
    let mut perm_cache: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size {
        let global = step * batch_size as u64 + j as u64;
        let epoch = global / n_train as u64;
        let pos = (global % n_train as u64) as usize;
        let perm = match &perm_cache {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut p: Vec<usize> = (0..n_train).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x0045_504f_4348, epoch]));
                p.shuffle(&mut rng);
                perm_cache = Some((epoch, p));
                &perm_cache.as_ref().unwrap().1
            }
        };
        out.push(perm[pos]);
    }
    out
}

/// Greedy single-pass evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub solved: usize,
    pub solve_rate: f64,
    pub format_rate: f64,
    /// (class, n, solved) per answer residue class.
    pub per_class: Vec<(u8, usize, usize)>,
}

/// Deterministic greedy decode + verification over a problem set. Format
/// failures count as incorrect.
pub fn evaluate(
    params: &PolicyParams,
    problems: &[ProblemInstance],
    vocab: &Vocab,
    max_response_len: usize,
) -> EvalReport {
    let results: Vec<(u8, bool, bool)> = problems
        .par_iter()
        .map(|p| {
            let ctx = Context::initial(p.prompt_tokens.clone());
            let r = greedy_rollout(params, &ctx, None, max_response_len, vocab);
            let parsed = parse_response(&r.tokens, vocab);
            let out = crate::schema::verify(p, &parsed);
            (p.answer_class, out.reward == 1, out.format_ok)
        })
        .collect();
    let n = results.len();
    let solved = results.iter().filter(|(_, s, _)| *s).count();
    let format_ok = results.iter().filter(|(_, _, f)| *f).count();
    let mut per_class = vec![(0u8, 0usize, 0usize), (1, 0, 0), (2, 0, 0)];
    for (class, s, _) in &results {
        let e = &mut per_class[*class as usize];
        e.1 += 1;
        e.2 += *s as usize;
    }
    EvalReport {
        n,
        solved,
        solve_rate: solved as f64 / n.max(1) as f64,
        format_rate: format_ok as f64 / n.max(1) as f64,
        per_class,
    }
}

/// One turn of a test-time transcript.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub tokens: Vec<TokenId>,
    pub rendered: String,
    pub outcome: VerifierOutcome,
    pub feedback: Option<FeedbackText>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceTranscript {
    pub problem_id: u64,
    pub final_answer: Option<Vec<TokenId>>,
    pub answer_rendered: Option<String>,
    pub turns_used: usize,
    pub verified: bool,
    pub simulator_calls: usize,
    pub trace: Vec<TurnRecord>,
}

/// Test-time multi-turn refinement: greedy decode, and on verifier
/// rejection request feedback for the single rollout (no merge), inject it
/// and regenerate. Returns at the first accepted answer or after
/// `max_turns` attempts with the last answer flagged unverified.
pub fn infer_multiturn(
    problem: &ProblemInstance,
    params: &PolicyParams,
    simulator: &Simulator,
    max_turns: usize,
    max_response_len: usize,
    max_feedback_len: usize,
    vocab: &Vocab,
) -> Result<InferenceTranscript, TrainError> {
    assert!(max_turns >= 1, "max_turns must be >= 1");
    let mut trace = Vec::new();
    let mut simulator_calls = 0usize;
    let mut ctx = Context::initial(problem.prompt_tokens.clone());
    let mut prefix: Option<crate::policy::ForcedPrefix> = None;

    for turn in 0..max_turns {
        let mut rollout = greedy_rollout(params, &ctx, prefix.as_ref(), max_response_len, vocab);
        let parsed = parse_response(&rollout.tokens, vocab);
        let outcome = crate::schema::verify(problem, &parsed);
        rollout.reward = outcome.reward;
        let answer = parsed.answer.clone();

        let accepted = outcome.reward == 1;
        let last_turn = turn + 1 == max_turns;
        let mut feedback_used = None;
        if !accepted && !last_turn {
            // Single-rollout path: one subgroup query, no merging.
            let fb = simulator.subgroup_feedback(problem, &[&rollout])?;
            simulator_calls += 1;
            let regen = build_regeneration_context(problem, &fb, max_feedback_len, vocab)?;
            ctx = regen.ctx;
            prefix = Some(regen.forced_prefix);
            feedback_used = Some(fb);
        }
        trace.push(TurnRecord {
            turn,
            rendered: vocab.render(&rollout.tokens),
            tokens: rollout.tokens,
            outcome,
            feedback: feedback_used,
        });

        if accepted || last_turn {
            return Ok(InferenceTranscript {
                problem_id: problem.id,
                answer_rendered: answer.as_ref().map(|a| vocab.render(a)),
                final_answer: answer,
                turns_used: turn + 1,
                verified: accepted,
                simulator_calls,
                trace,
            });
        }
    }
    unreachable!("loop returns on the last turn");
}

/// Output-directory lock: one active trainer per directory. Stale locks
/// from dead processes are taken over.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(".lock");
        if let Ok(content) = std::fs::read_to_string(&path) {
            let pid: u32 = content.trim().parse().unwrap_or(0);
            let alive = pid != 0 && Path::new(&format!("/proc/{pid}")).exists();
            if alive && pid != std::process::id() {
                return Err(TrainError::Locked(dir.to_path_buf(), pid));
            }
            std::fs::remove_file(&path)?;
        }
        let mut opts = std::fs::OpenOptions::new();
        opts.write(true).create_new(true);
        use std::io::Write;
        let mut f = opts.open(&path)?;
        write!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Final record of a training run, written as `run_summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: RunMode,
    pub seed: u64,
    pub max_turns: usize,
    pub steps_completed: u64,
    pub final_val_solve_rate: f64,
    pub best_val_solve_rate: f64,
    pub checkpoint: String,
    pub mean_step_seconds: f64,
    pub stopped_early: bool,
}

/// Runs (or resumes) a full training job in `out_dir`: dataset generation,
/// the step loop, periodic validation, atomic checkpointing and the metrics
/// stream. See [`crate::config::RunConfig`] for the file form.
pub fn run_training(
    run_cfg: &crate::config::RunConfig,
    out_dir: &Path,
) -> Result<TrainSummary, TrainError> {
    run_cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;

    let vocab = Vocab::standard();
    let dataset = generate_dataset(run_cfg.dataset.n, run_cfg.dataset.seed, &vocab)?;
    export_dataset(&dataset, &vocab, out_dir)?;

    let cfg = run_cfg.train_config();
    let init = match run_cfg.init {
        crate::config::InitKind::SchemaPrimed => PolicyParams::schema_primed(&vocab),
        crate::config::InitKind::Zeros => PolicyParams::zeros(vocab.size()),
    };

    let ckpt_path = out_dir.join("latest.mfrl");
    let state_path = out_dir.join("latest.state");
    let mut trainer = Trainer::new(cfg, vocab.clone(), init)?;
    if ckpt_path.exists() && state_path.exists() {
        // Resume: parameters from the checkpoint, step/reference/moments
        // from the state file. The batch schedule and per-prompt seeds are
        // pure functions of (seed, step), so the run continues seamlessly.
        trainer.params = checkpoint::load_params_checked(&ckpt_path, &vocab)?;
        let state = checkpoint::load_state(&state_path, &vocab)?;
        trainer.step = state.step;
        trainer.ref_params = state.ref_params.clone();
        trainer.optimizer = Optimizer::restore(trainer.cfg.optimizer, vocab.size(), &state);
    }

    let mut writer = MetricsWriter::open(out_dir, run_cfg.metrics_flush_interval)?;
    let mut wall_clocks = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut evals_since_best = 0usize;
    let mut stopped_early = false;

    let save = |trainer: &Trainer, tag: Option<u64>| -> Result<(), TrainError> {
        checkpoint::save_params(&ckpt_path, &trainer.vocab, &trainer.params)?;
        let mut state = TrainState {
            step: trainer.step,
            ref_params: trainer.ref_params.clone(),
            opt_step: 0,
            opt_m: None,
            opt_v: None,
        };
        trainer.optimizer.save_into(&mut state);
        checkpoint::save_state(&state_path, &trainer.vocab, &state)?;
        if let Some(step) = tag {
            checkpoint::save_params(
                &out_dir.join(format!("ckpt_step{step:06}.mfrl")),
                &trainer.vocab,
                &trainer.params,
            )?;
        }
        Ok(())
    };

    if trainer.step == 0 {
        // Initial checkpoint: a zero-step run still yields a loadable policy.
        save(&trainer, Some(0))?;
    }

    while trainer.step < trainer.cfg.total_steps {
        let step = trainer.step;
        let idxs = batch_indices(
            trainer.cfg.seed,
            step,
            trainer.cfg.batch_size,
            dataset.train.len(),
        );
        let batch: Vec<&ProblemInstance> = idxs.iter().map(|&i| &dataset.train[i]).collect();
        let mut result = trainer.run_step(&batch)?;

        let is_last = trainer.step == trainer.cfg.total_steps;
        if step % run_cfg.val_interval == 0 {
            let report = evaluate(
                &trainer.params,
                &dataset.validation,
                &vocab,
                trainer.cfg.max_response_len,
            );
            result.metrics.val_solve_rate = Some(report.solve_rate);
            if report.solve_rate > best_val {
                best_val = report.solve_rate;
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
            }
            if let Some(patience) = run_cfg.early_stop_patience {
                if evals_since_best >= patience {
                    stopped_early = true;
                }
            }
        }

        if let Some(refresh) = run_cfg.ref_refresh_interval {
            if refresh > 0 && trainer.step % refresh == 0 {
                trainer.ref_params = trainer.params.clone();
            }
        }

        wall_clocks.push(result.metrics.wall_clock_s);
        writer.append(&result.metrics)?;
        if trainer.step % run_cfg.checkpoint_interval == 0 || is_last || stopped_early {
            save(&trainer, Some(trainer.step))?;
            writer.flush()?;
        }
        if stopped_early {
            break;
        }
    }

    // Final validation if the loop never ran (total_steps 0) or training
    // ended between validation points.
    let final_report = evaluate(
        &trainer.params,
        &dataset.validation,
        &vocab,
        trainer.cfg.max_response_len,
    );
    let last_val = final_report.solve_rate;
    best_val = best_val.max(last_val);
    save(&trainer, None)?;
    writer.flush()?;

    let summary = TrainSummary {
        mode: trainer.cfg.mode,
        seed: trainer.cfg.seed,
        max_turns: trainer.cfg.max_turns,
        steps_completed: trainer.step,
        final_val_solve_rate: last_val,
        best_val_solve_rate: best_val,
        checkpoint: ckpt_path.display().to_string(),
        mean_step_seconds: if wall_clocks.is_empty() {
            0.0
        } else {
            wall_clocks.iter().sum::<f64>() / wall_clocks.len() as f64
        },
        stopped_early,
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out_dir.join("run_summary.json"), summary_json)?;
    Ok(summary)
}

fn export_dataset(dataset: &DatasetSplit, vocab: &Vocab, out_dir: &Path) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    crate::env::export_jsonl(&mut buf, &dataset.train, vocab)?;
    crate::env::export_jsonl(&mut buf, &dataset.validation, vocab)?;
    crate::env::export_jsonl(&mut buf, &dataset.test, vocab)?;
    std::fs::write(out_dir.join("dataset.jsonl"), buf)?;
    Ok(())
}

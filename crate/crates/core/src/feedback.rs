//! Group-level verbal feedback for all-failed groups.
//!
//! Aggregation is two-step: randomly partition the K rollouts into
//! `g = ⌈K / subgroup_size⌉` subgroups, obtain one feedback per subgroup,
//! then merge into a single (Issue, Fix steps) feedback. Two interchangeable
//! backends: a deterministic scripted oracle driven by the task's hint
//! function, and a remote client speaking the chat-completions wire shape
//! (`{model, messages, max_tokens, temperature}` → `{choices:[{message:
//! {content}}]}`) with bounded concurrency, per-call timeout and exponential
//! backoff.
//!
//! The scripted oracle narrows without revealing: its feedback carries the
//! hint token for the answer's residue class and never the answer token.

use crate::env::{hint, ProblemInstance};
use crate::policy::Rollout;
use crate::vocab::{TokenId, Vocab};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Duration;
use thiserror::Error;

/// System prompt for obtaining subgroup feedback (remote backend).
pub const FEEDBACK_SYSTEM_PROMPT: &str = include_str!("../assets/prompts/feedback_system.txt");
/// System prompt for merging subgroup feedbacks (remote backend).
pub const MERGE_SYSTEM_PROMPT: &str = include_str!("../assets/prompts/merge_system.txt");
/// Template for feedback injection and regeneration rollouts.
pub const INJECTION_REGEN_PROMPT: &str = include_str!("../assets/prompts/injection_regen.txt");
/// System prompt specifying the structured output format for rollouts.
pub const TRAINING_SYSTEM_PROMPT: &str = include_str!("../assets/prompts/training_system.txt");

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error(
        "subgroup contains a rollout with reward 1; feedback is only defined for all-failed groups"
    )]
    RewardedRollout,
    #[error("empty subgroup")]
    EmptySubgroup,
    #[error("no subgroup feedbacks to merge")]
    NothingToMerge,
    #[error("remote backend selected but no endpoint configured")]
    MissingEndpoint,
    #[error("auth environment variable {0} is not set")]
    MissingAuthEnv(String),
    #[error("remote call failed after {attempts} attempts: {last_error}")]
    Retriable { attempts: u32, last_error: String },
    #[error("protocol error: {reason}; raw payload: {payload}")]
    Protocol { reason: String, payload: String },
}

impl FeedbackError {
    /// Hard failures make the turn fall back to no-feedback termination;
    /// contract violations are bugs and must surface.
    pub fn is_contract_violation(&self) -> bool {
        matches!(
            self,
            FeedbackError::RewardedRollout | FeedbackError::EmptySubgroup
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    Scripted,
    Remote,
    SelfProduced,
}

/// Natural-language feedback with Issue / Fix-steps structure, tokenized
/// into the run vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackText {
    pub tokens: Vec<TokenId>,
    pub issue: String,
    pub fix_steps: String,
    pub source: FeedbackSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Remote,
}

/// Simulator configuration. `auth_env` names an environment variable holding
/// the secret; the secret itself never appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    pub backend: BackendKind,
    pub subgroup_size: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
}

fn default_model() -> String {
    "gpt-4o".to_string()
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    4
}
fn default_max_retries() -> u32 {
    3
}
fn default_retry_base_ms() -> u64 {
    200
}

impl SimulatorConfig {
    pub fn scripted(subgroup_size: usize) -> Self {
        Self {
            backend: BackendKind::Scripted,
            subgroup_size,
            endpoint: None,
            auth_env: None,
            model: default_model(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            max_retries: default_max_retries(),
            retry_base_ms: default_retry_base_ms(),
        }
    }
}

/// Randomly partitions `count` rollout indices into `⌈count/subgroup_size⌉`
/// disjoint subgroups covering all of them; the final subgroup may be smaller.
pub fn partition_group<R: Rng>(count: usize, subgroup_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(subgroup_size >= 1, "subgroup_size must be >= 1");
    let mut indices: Vec<usize> = (0..count).collect();
    indices.shuffle(rng);
    indices.chunks(subgroup_size).map(|c| c.to_vec()).collect()
}

/// The feedback simulator. Scripted is pure and reentrant; the remote
/// backend holds an HTTP agent and is safe to share across worker threads.
pub struct Simulator {
    cfg: SimulatorConfig,
    vocab: Vocab,
    agent: Option<ureq::Agent>,
    auth: Option<String>,
}

impl Simulator {
    pub fn new(cfg: SimulatorConfig, vocab: Vocab) -> Result<Self, FeedbackError> {
        let (agent, auth) = match cfg.backend {
            BackendKind::Scripted => (None, None),
            BackendKind::Remote => {
                if cfg.endpoint.is_none() {
                    return Err(FeedbackError::MissingEndpoint);
                }
                let auth = match &cfg.auth_env {
                    Some(var) => Some(
                        std::env::var(var)
                            .map_err(|_| FeedbackError::MissingAuthEnv(var.clone()))?,
                    ),
                    None => None,
                };
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
                    .build()
                    .into();
                (Some(agent), auth)
            }
        };
        Ok(Self {
            cfg,
            vocab,
            agent,
            auth,
        })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.cfg
    }

    pub fn subgroup_size(&self) -> usize {
        self.cfg.subgroup_size
    }

    /// Feedback for one all-failed subgroup.
    pub fn subgroup_feedback(
        &self,
        problem: &ProblemInstance,
        subgroup: &[&Rollout],
    ) -> Result<FeedbackText, FeedbackError> {
        if subgroup.is_empty() {
            return Err(FeedbackError::EmptySubgroup);
        }
        if subgroup.iter().any(|r| r.reward != 0) {
            return Err(FeedbackError::RewardedRollout);
        }
        match self.cfg.backend {
            BackendKind::Scripted => Ok(scripted_feedback(problem, &self.vocab)),
            BackendKind::Remote => {
                let user = self.render_subgroup_request(problem, subgroup);
                let content = self.chat(FEEDBACK_SYSTEM_PROMPT, &user)?;
                self.parse_remote_feedback(&content)
            }
        }
    }

    /// Merges subgroup feedbacks into one. With a single feedback the
    /// scripted backend returns its input unchanged and the remote backend
    /// skips the network round trip.
    pub fn merge_feedback(
        &self,
        problem: &ProblemInstance,
        feedbacks: &[FeedbackText],
    ) -> Result<FeedbackText, FeedbackError> {
        if feedbacks.is_empty() {
            return Err(FeedbackError::NothingToMerge);
        }
        if feedbacks.len() == 1 {
            return Ok(feedbacks[0].clone());
        }
        match self.cfg.backend {
            BackendKind::Scripted => Ok(merge_scripted(problem, feedbacks, &self.vocab)),
            BackendKind::Remote => {
                let mut user = format!("Problem:\n{}\n", self.vocab.render(&problem.prompt_tokens));
                for (i, f) in feedbacks.iter().enumerate() {
                    user.push_str(&format!(
                        "\nFeedback {}:\n<feedback>\nIssue:\n{}\nFix steps:\n{}\n</feedback>\n",
                        i + 1,
                        f.issue,
                        f.fix_steps
                    ));
                }
                let content = self.chat(MERGE_SYSTEM_PROMPT, &user)?;
                self.parse_remote_feedback(&content)
            }
        }
    }

    fn render_subgroup_request(&self, problem: &ProblemInstance, subgroup: &[&Rollout]) -> String {
        // Full model outputs plus verifier outcomes, schema tags included.
        let mut user = format!("Problem:\n{}\n", self.vocab.render(&problem.prompt_tokens));
        for (i, r) in subgroup.iter().enumerate() {
            user.push_str(&format!(
                "\nRollout {} (reward {}):\n{}\n",
                i + 1,
                r.reward,
                self.vocab.render(&r.tokens)
            ));
        }
        user
    }

    fn chat(&self, system: &str, user: &str) -> Result<String, FeedbackError> {
        let agent = self.agent.as_ref().expect("remote backend has an agent");
        let endpoint = self.cfg.endpoint.as_deref().expect("checked at build");
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "max_tokens": 512,
            "temperature": 0.0,
        });

        let mut last_error = String::new();
        for attempt in 0..self.cfg.max_retries {
            if attempt > 0 {
                let delay = self.cfg.retry_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut req = agent
                .post(endpoint)
                .header("content-type", "application/json");
            if let Some(auth) = &self.auth {
                req = req.header("authorization", &format!("Bearer {auth}"));
            }
            match req.send_json(&body) {
                Ok(mut resp) => {
                    let payload: serde_json::Value =
                        resp.body_mut()
                            .read_json()
                            .map_err(|e| FeedbackError::Protocol {
                                reason: format!("response is not JSON: {e}"),
                                payload: String::new(),
                            })?;
                    let content = payload
                        .pointer("/choices/0/message/content")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| FeedbackError::Protocol {
                            reason: "missing choices[0].message.content".to_string(),
                            payload: payload.to_string(),
                        })?;
                    return Ok(content.to_string());
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
        }
        Err(FeedbackError::Retriable {
            attempts: self.cfg.max_retries,
            last_error,
        })
    }

    /// Extracts the `<feedback>` wrapper, splits Issue / Fix steps, and
    /// re-tokenizes into the run vocabulary via a whitelist: known
    /// non-structural words map to their tokens, everything else to `<unk>`.
    fn parse_remote_feedback(&self, content: &str) -> Result<FeedbackText, FeedbackError> {
        let open = content
            .find("<feedback>")
            .ok_or_else(|| FeedbackError::Protocol {
                reason: "missing <feedback> wrapper".to_string(),
                payload: content.to_string(),
            })?;
        let close = content
            .find("</feedback>")
            .ok_or_else(|| FeedbackError::Protocol {
                reason: "missing </feedback> wrapper".to_string(),
                payload: content.to_string(),
            })?;
        if close < open {
            return Err(FeedbackError::Protocol {
                reason: "</feedback> precedes <feedback>".to_string(),
                payload: content.to_string(),
            });
        }
        let inner = &content[open + "<feedback>".len()..close];
        let (issue, fix_steps) = match inner.find("Fix steps:") {
            Some(split) => (
                inner[..split]
                    .trim()
                    .trim_start_matches("Issue:")
                    .trim()
                    .to_string(),
                inner[split + "Fix steps:".len()..].trim().to_string(),
            ),
            None => (inner.trim().to_string(), String::new()),
        };
        let tokens = retokenize(inner, &self.vocab);
        Ok(FeedbackText {
            tokens,
            issue,
            fix_steps,
            source: FeedbackSource::Remote,
        })
    }
}

/// Maps free text onto the run vocabulary. Structural tags, `<eos>` and
/// unknown words all become `<unk>` so injected feedback can never break the
/// schema or terminate a rollout early.
pub fn retokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    let unk = vocab.unk();
    text.split_whitespace()
        .map(|w| {
            let w = w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>');
            match vocab.id(w) {
                Some(id) if !vocab.is_structural(id) && id != vocab.eos() && id != unk => id,
                _ => unk,
            }
        })
        .collect()
}

/// The deterministic scripted oracle, mirroring the Issue / Fix-steps
/// structure: the issue quotes the problem statement (self-censoring the
/// ground-truth answer token, which must never appear) and the fix names
/// the answer's residue class by its hint token.
pub fn scripted_feedback(problem: &ProblemInstance, vocab: &Vocab) -> FeedbackText {
    scripted_with_hints(problem, &[hint(problem, vocab)], vocab)
}

/// How many times the issue and fix segments each restate the problem
/// expression. Mirrors the three-step structure of the feedback templates
/// (pitfalls, plan steps, recompute steps all reference the expression);
/// operationally, each restatement raises the prompt tokens' multiplicity
/// in the regeneration bag, concentrating regeneration on what the policy
/// already knows about this problem.
const QUOTE_REPEATS: usize = 3;

fn scripted_with_hints(
    problem: &ProblemInstance,
    hints: &[TokenId],
    vocab: &Vocab,
) -> FeedbackText {
    // Shape: issue, hint(s), quote*3, fix, quote*3 — the hint leads so a
    // capped injection never loses it. The ground-truth answer token is
    // censored from every quote.
    let quote: Vec<TokenId> = problem
        .prompt_tokens
        .iter()
        .copied()
        .filter(|&t| t != problem.answer_token)
        .collect();
    let mut tokens = vec![vocab.id("issue").unwrap()];
    tokens.extend_from_slice(hints);
    for _ in 0..QUOTE_REPEATS {
        tokens.extend_from_slice(&quote);
    }
    tokens.push(vocab.id("fix").unwrap());
    for _ in 0..QUOTE_REPEATS {
        tokens.extend_from_slice(&quote);
    }
    let names: Vec<&str> = hints.iter().map(|&h| vocab.token(h).unwrap()).collect();
    FeedbackText {
        tokens,
        issue: format!(
            "the attempts miss the residue class ({}) of {}",
            names.join(" "),
            vocab.render(&problem.prompt_tokens)
        ),
        fix_steps: format!(
            "recompute {} step by step and restrict candidates to class {}",
            vocab.render(&problem.prompt_tokens),
            names.join(" ")
        ),
        source: FeedbackSource::Scripted,
    }
}

/// Scripted merge: deduplicates hint tokens across subgroup feedbacks and
/// rebuilds the canonical shape.
fn merge_scripted(
    problem: &ProblemInstance,
    feedbacks: &[FeedbackText],
    vocab: &Vocab,
) -> FeedbackText {
    let mut hints: Vec<TokenId> = Vec::new();
    for f in feedbacks {
        for &t in &f.tokens {
            let name = vocab.token(t).unwrap_or("");
            if name.starts_with('H') && !hints.contains(&t) {
                hints.push(t);
            }
        }
    }
    scripted_with_hints(problem, &hints, vocab)
}

/// One aggregation round: partition, per-subgroup feedback (concurrently for
/// the remote backend, bounded by `max_in_flight`), then merge.
///
/// `calls` counts simulator queries: one per subgroup, plus one for the merge
/// when the backend actually issues a remote merge request.
pub struct AggregatedFeedback {
    pub feedback: FeedbackText,
    pub calls: usize,
}

pub fn aggregate_group_feedback<R: Rng>(
    sim: &Simulator,
    problem: &ProblemInstance,
    group: &[Rollout],
    rng: &mut R,
) -> Result<AggregatedFeedback, FeedbackError> {
    let partition = partition_group(group.len(), sim.subgroup_size(), rng);
    let g = partition.len();

    let feedbacks: Vec<FeedbackText> = match sim.cfg.backend {
        BackendKind::Scripted => partition
            .iter()
            .map(|idxs| {
                let subgroup: Vec<&Rollout> = idxs.iter().map(|&i| &group[i]).collect();
                sim.subgroup_feedback(problem, &subgroup)
            })
            .collect::<Result<_, _>>()?,
        BackendKind::Remote => {
            // Bounded fan-out over subgroups; results keep partition order.
            let mut results: Vec<Option<Result<FeedbackText, FeedbackError>>> =
                (0..g).map(|_| None).collect();
            let chunk = sim.cfg.max_in_flight.max(1);
            for batch in partition.chunks(chunk).enumerate() {
                let (batch_idx, subgroups) = batch;
                std::thread::scope(|scope| {
                    let handles: Vec<_> = subgroups
                        .iter()
                        .map(|idxs| {
                            let subgroup: Vec<&Rollout> = idxs.iter().map(|&i| &group[i]).collect();
                            scope.spawn(move || sim.subgroup_feedback(problem, &subgroup))
                        })
                        .collect();
                    for (j, h) in handles.into_iter().enumerate() {
                        results[batch_idx * chunk + j] = Some(h.join().expect("worker panicked"));
                    }
                });
            }
            results
                .into_iter()
                .map(|r| r.expect("all subgroups processed"))
                .collect::<Result<_, _>>()?
        }
    };

    let merge_is_remote_call = sim.cfg.backend == BackendKind::Remote && g > 1;
    let feedback = sim.merge_feedback(problem, &feedbacks)?;
    Ok(AggregatedFeedback {
        feedback,
        calls: g + merge_is_remote_call as usize,
    })
}

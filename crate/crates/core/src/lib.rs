//! Multi-turn feedback-guided reinforcement learning with verifiable
//! rewards, small enough to verify on a desk.
//!
//! The training loop samples groups of rollouts per prompt, classifies each
//! group's binary rewards (all-failed / all-positive / mixed), and branches:
//! mixed groups get a group-relative clipped policy-gradient update, all-failed
//! groups trigger verbal feedback and feedback-conditioned regeneration, and
//! regenerated all-positive groups get a cross-turn preference update against
//! the previous turn. Feedback is injected into a fixed `<feedback>` slot at
//! the start of the reasoning block and masked out of every loss.
//!
//! Modules:
//! - [`vocab`], [`policy`]: token alphabet and a log-linear policy with exact
//!   sampling, log-probs and closed-form gradients.
//! - [`schema`]: output-schema parsing, binary verification, regeneration
//!   context construction with loss-mask spans.
//! - [`env`]: synthetic verifiable tasks with ground truth and hint classes.
//! - [`feedback`]: scripted and remote (chat-completions) feedback simulators
//!   with subgroup/merge aggregation.
//! - [`objectives`]: advantages, clipped surrogate, low-variance KL,
//!   cross-turn preference loss, piecewise per-prompt dispatch.
//! - [`trainer`]: the per-prompt turn state machine, mini-batch stepping,
//!   training driver and multi-turn inference.
//! - [`checkpoint`], [`metrics`], [`config`], [`optim`]: persistence, the
//!   metrics stream, run configuration and optimizers.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod feedback;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod schema;
pub mod trainer;
pub mod vocab;

pub use config::RunConfig;
pub use env::{DatasetSplit, ProblemInstance};
pub use metrics::StepMetrics;
pub use policy::{Context, PolicyParams, Rollout};
pub use trainer::{TrainConfig, Trainer};
pub use vocab::{TokenId, Vocab};

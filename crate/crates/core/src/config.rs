//! Run configuration: a single JSON document plus environment-variable
//! overrides.
//!
//! Overrides use the `MULFERL_` prefix with `__` as the path separator, e.g.
//! `MULFERL_TRAIN__LEARNING_RATE=0.05` or `MULFERL_MODE=grpo-baseline`.
//! Values parse as JSON when possible, otherwise as strings.

use crate::trainer::{RunMode, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Format-reliable initialization with a flat ten-way answer slot.
    SchemaPrimed,
    Zeros,
}

fn default_init() -> InitKind {
    InitKind::SchemaPrimed
}
fn default_checkpoint_interval() -> u64 {
    50
}
fn default_metrics_flush_interval() -> usize {
    1
}
fn default_val_interval() -> u64 {
    25
}

/// File form of a training run: everything the trainer needs plus dataset
/// parameters, output cadence and the mode flag selecting ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "RunConfig::default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "default_init")]
    pub init: InitKind,
    pub train: TrainConfig,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    #[serde(default = "default_metrics_flush_interval")]
    pub metrics_flush_interval: usize,
    #[serde(default = "default_val_interval")]
    pub val_interval: u64,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default)]
    pub ref_refresh_interval: Option<u64>,
    /// Output directory; a CLI `--out` flag takes precedence.
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    fn default_mode() -> RunMode {
        RunMode::Mulferl
    }

    /// The trainer-facing config: the `train` section with the top-level
    /// mode and seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.dataset.n < 3 {
            return Err(TrainError::Config(format!(
                "dataset.n must be >= 3, got {}",
                self.dataset.n
            )));
        }
        if self.checkpoint_interval == 0 {
            return Err(TrainError::Config(
                "checkpoint_interval must be >= 1".into(),
            ));
        }
        if self.val_interval == 0 {
            return Err(TrainError::Config("val_interval must be >= 1".into()));
        }
        self.train_config().validate()
    }

    /// Parses a config file, applying `MULFERL_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, std::env::vars())
    }

    pub fn from_json(
        text: &str,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<Self, TrainError> {
        let mut value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| TrainError::Config(format!("config is not valid JSON: {e}")))?;
        for (key, val) in env {
            let Some(path) = key.strip_prefix("MULFERL_") else {
                continue;
            };
            let segments: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
            apply_override(&mut value, &segments, &val);
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_override(value: &mut serde_json::Value, path: &[String], raw: &str) {
    if path.is_empty() {
        return;
    }
    let obj = match value.as_object_mut() {
        Some(o) => o,
        None => return,
    };
    if path.len() == 1 {
        let parsed = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(path[0].clone(), parsed);
    } else {
        let child = obj
            .entry(path[0].clone())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        apply_override(child, &path[1..], raw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"n": 100, "seed": 1},
        "train": {"learning_rate": 0.05}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(MINIMAL, std::iter::empty()).unwrap();
        assert_eq!(cfg.mode, RunMode::Mulferl);
        assert_eq!(cfg.train.group_size, 8);
        assert_eq!(cfg.train.max_turns, 2);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.learning_rate, 0.05);
        assert_eq!(cfg.train.dpo.lambda_weight, 0.01);
        assert_eq!(cfg.train.grpo.kl_coef, 0.001);
        assert_eq!(cfg.init, InitKind::SchemaPrimed);
    }

    #[test]
    fn missing_learning_rate_names_the_field() {
        let err = RunConfig::from_json(
            r#"{"dataset": {"n": 100}, "train": {}}"#,
            std::iter::empty(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn env_overrides_apply() {
        let env = vec![
            ("MULFERL_MODE".to_string(), "grpo-baseline".to_string()),
            ("MULFERL_SEED".to_string(), "9".to_string()),
            (
                "MULFERL_TRAIN__LEARNING_RATE".to_string(),
                "0.125".to_string(),
            ),
            (
                "MULFERL_TRAIN__GRPO__CLIP_EPS".to_string(),
                "0.3".to_string(),
            ),
            ("IGNORED".to_string(), "x".to_string()),
        ];
        let cfg = RunConfig::from_json(MINIMAL, env.into_iter()).unwrap();
        assert_eq!(cfg.mode, RunMode::GrpoBaseline);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.learning_rate, 0.125);
        assert_eq!(cfg.train.grpo.clip_eps, 0.3);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = r#"{
            "dataset": {"n": 2},
            "train": {"learning_rate": 0.05}
        }"#;
        let err = RunConfig::from_json(bad, std::iter::empty()).unwrap_err();
        assert!(err.to_string().contains("dataset.n"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected_by_name() {
        let bad = r#"{
            "dataset": {"n": 100},
            "train": {"learning_rate": 0.05, "learnig_rate_typo": 1.0}
        }"#;
        let err = RunConfig::from_json(bad, std::iter::empty()).unwrap_err();
        assert!(err.to_string().contains("learnig_rate_typo"), "{err}");
    }
}

//! Training orchestration: grouped rollout collection with retrieval,
//! loss composition, Adam updates, greedy evaluation, and metric emission.
//!
//! One gradient epoch per batch: theta_old is the policy at batch start, so
//! the importance ratio is exactly 1 on the update that consumes the batch.

mod adam;
mod collect;
mod eval;
mod metrics;
mod run;
mod step;

pub use adam::{Adam, AdamConfig};
pub use collect::collect_group;
pub use eval::evaluate;
pub use metrics::{gap_profiles, GapProfiles, MetricsRecord};
pub use run::{run, RunOutput};
pub use step::{assemble_gradient, train_step, StepOutput};

use crate::env::{EnvError, EnvKind};
use crate::losses::{LossError, Method, MethodSpec};
use crate::policy::{PolicyError, Trajectory};
use crate::skillbank::BankError;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// G trajectories for one task plus group-relative advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task_id: String,
    pub task_type: String,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub skill_id: Option<usize>,
}

// Deterministic stream addressing: every rollout, retrieval draw, and eval
// owns its own (seed, stream) pair.
const STREAM_TASKS: u64 = 0x7a5c;
const STREAM_ROLLOUT_BASE: u64 = 1 << 40;
const STREAM_RETRIEVAL_BASE: u64 = 2 << 40;
const STREAM_EVAL_BASE: u64 = 3 << 40;

pub(crate) fn rollout_stream(step: usize, task_idx: usize, member: usize) -> u64 {
    debug_assert!(step < 1 << 20 && task_idx < 1 << 10 && member < 1 << 10);
    STREAM_ROLLOUT_BASE | ((step as u64) << 20) | ((task_idx as u64) << 10) | member as u64
}

pub(crate) fn retrieval_stream(step: usize, task_idx: usize) -> u64 {
    STREAM_RETRIEVAL_BASE | ((step as u64) << 10) | task_idx as u64
}

pub(crate) fn eval_stream(step: usize, task_idx: usize) -> u64 {
    STREAM_EVAL_BASE | ((step as u64) << 20) | task_idx as u64
}

pub(crate) fn task_stream() -> u64 {
    STREAM_TASKS
}

fn default_hidden() -> usize {
    64
}

fn default_steps() -> usize {
    300
}

fn default_tasks_per_batch() -> usize {
    4
}

fn default_group_size() -> usize {
    8
}

fn default_lr() -> f64 {
    1e-3
}

fn default_eval_every() -> usize {
    20
}

fn default_c_ucb() -> f64 {
    1.0
}

/// Full run configuration; mirrors the JSON config document field-for-field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: MethodSpec,
    pub env: String,
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tasks_per_batch")]
    pub tasks_per_batch: usize,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub eval_tasks: Option<Vec<String>>,
    #[serde(default)]
    pub eval_with_skills: bool,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_c_ucb")]
    pub c_ucb: f64,
    pub out_dir: String,
}

impl TrainConfig {
    pub fn new(method: Method, env: EnvKind, seed: u64, out_dir: &str) -> Self {
        Self {
            method: MethodSpec::defaults(method),
            env: env.name().to_string(),
            seed,
            steps: default_steps(),
            tasks_per_batch: default_tasks_per_batch(),
            group_size: default_group_size(),
            learning_rate: default_lr(),
            adam: AdamConfig::default(),
            grad_clip: None,
            eval_every: default_eval_every(),
            eval_tasks: None,
            eval_with_skills: false,
            hidden: default_hidden(),
            c_ucb: default_c_ucb(),
            out_dir: out_dir.to_string(),
        }
    }

    pub fn env_kind(&self) -> Result<EnvKind, TrainError> {
        EnvKind::parse(&self.env)
            .ok_or_else(|| TrainError::Config(format!("unknown env: {}", self.env)))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.env_kind()?;
        if self.group_size < 2 {
            return Err(TrainError::Config("group_size must be at least 2".into()));
        }
        if self.tasks_per_batch == 0 {
            return Err(TrainError::Config("tasks_per_batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(TrainError::Config("hidden width must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config("grad_clip must be positive".into()));
            }
        }
        if self.steps >= 1 << 20 {
            return Err(TrainError::Config("steps exceed stream addressing range".into()));
        }
        if self.tasks_per_batch >= 1 << 10 || self.group_size >= 1 << 10 {
            return Err(TrainError::Config("batch dimensions exceed stream addressing range".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(TrainError::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::new(Method::Sdar, EnvKind::TreasureRooms, 7, "/tmp/x");
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.method, cfg.method);
        assert_eq!(back.seed, 7);
        back.validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let text = r#"{"method":{"method":"GRPO","lambda":0.0,"alpha_kl":0.01,"eps_lo":0.2,
            "eps_hi":0.2,"c_dual":3.0,"eps_w":0.2,
            "gate":{"strategy":"none","beta":0.0},"kl_estimator":"k3","retrieval":"km"},
            "env":"treasure_rooms","seed":0,"out_dir":"/tmp/x","bogus_key":1}"#;
        let err = serde_json::from_str::<TrainConfig>(text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = TrainConfig::new(Method::Grpo, EnvKind::LookupQa, 0, "/tmp/x");
        cfg.group_size = 1;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        cfg.group_size = 8;
        cfg.env = "alfworld".into();
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn stream_ids_do_not_collide() {
        let mut seen = std::collections::HashSet::new();
        for step in [0, 1, 5] {
            for task in 0..4 {
                assert!(seen.insert(retrieval_stream(step, task)));
                for member in 0..8 {
                    assert!(seen.insert(rollout_stream(step, task, member)));
                }
                assert!(seen.insert(eval_stream(step, task)));
            }
        }
        assert!(seen.insert(task_stream()));
    }
}

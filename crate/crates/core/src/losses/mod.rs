//! Training objectives and token-level signals: the teacher-student gap, the
//! sigmoid gates, the gated distillation loss, the clipped-surrogate policy
//! loss with dual clip and reference-KL, the Skill-SD and RLSD hybrids, the
//! full-distribution ablation divergences, and the method compositions.
//!
//! Every loss yields both a scalar value and the per-token weight (or
//! logit-gradient) terms that the backward pass consumes.

mod compose;
mod distill;
mod gate;
mod grpo;

pub use compose::{compose, compose_with_gates, ComposeOut, GradTerm};
pub use distill::{
    full_dist_divergence, kl_ref, sdar_loss, sdar_nondetached_value, sdar_nondetached_weights,
    sdar_signals, sdar_value_frozen, skill_sd_loss, DivergenceKind,
};
pub use gate::{gap, gate_value};
pub use grpo::{grpo_loss, group_advantages, rlsd_reweight, Advantages};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no valid tokens under the response mask")]
    EmptyMask,
    #[error("teacher log-probs missing")]
    MissingTeacher,
    #[error("old-policy log-probs missing")]
    MissingOldLogprobs,
    #[error("reference log-probs missing")]
    MissingRefLogprobs,
    #[error("required branch missing: {0}")]
    MissingBranch(&'static str),
    #[error("group must contain at least two trajectories")]
    GroupTooSmall,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStrategy {
    Entropy,
    Gap,
    SoftOr,
    None,
}

/// Token-level gate selector. `strategy = none` fixes the gate at exactly 1;
/// the others pass their raw score through a sigmoid of sharpness `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub strategy: GateStrategy,
    pub beta: f64,
    #[serde(default)]
    pub normalize_entropy: bool,
}

impl GateSpec {
    pub fn gap(beta: f64) -> Self {
        Self { strategy: GateStrategy::Gap, beta, normalize_entropy: false }
    }

    pub fn none() -> Self {
        Self { strategy: GateStrategy::None, beta: 0.0, normalize_entropy: false }
    }
}

/// Per-token diagnostics of one trajectory's distillation signals.
#[derive(Debug, Clone, Default)]
pub struct TokenSignals {
    pub delta: Vec<f64>,
    pub entropy: Vec<f64>,
    pub gate: Vec<f64>,
    pub loss_term: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "OPSD")]
    Opsd,
    #[serde(rename = "SkillGRPO")]
    SkillGrpo,
    #[serde(rename = "GRPO_plus_OPSD")]
    GrpoPlusOpsd,
    #[serde(rename = "SkillSD")]
    SkillSd,
    #[serde(rename = "RLSD")]
    Rlsd,
    #[serde(rename = "SDAR")]
    Sdar,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Grpo,
        Method::Opsd,
        Method::SkillGrpo,
        Method::GrpoPlusOpsd,
        Method::SkillSd,
        Method::Rlsd,
        Method::Sdar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Grpo => "GRPO",
            Method::Opsd => "OPSD",
            Method::SkillGrpo => "SkillGRPO",
            Method::GrpoPlusOpsd => "GRPO_plus_OPSD",
            Method::SkillSd => "SkillSD",
            Method::Rlsd => "RLSD",
            Method::Sdar => "SDAR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    RawDiff,
    K3,
}

/// What the SDAR distillation term matches per token: the sampled-token gap
/// (default) or a full-vocabulary divergence (ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillObjective {
    SampledGap,
    ReverseKl,
    ForwardKl,
    Jsd,
}

use crate::skillbank::RetrievalStrategy;

/// Fully resolved method configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    /// Distillation loss coefficient.
    pub lambda: f64,
    /// Reference-KL penalty coefficient.
    pub alpha_kl: f64,
    pub eps_lo: f64,
    pub eps_hi: f64,
    /// Dual-clip constant bounding the surrogate for negative advantages.
    pub c_dual: f64,
    /// RLSD advantage-reweight clip.
    pub eps_w: f64,
    pub gate: GateSpec,
    pub kl_estimator: KlEstimator,
    pub retrieval: RetrievalStrategy,
    #[serde(default = "default_distill")]
    pub distill: DistillObjective,
}

fn default_distill() -> DistillObjective {
    DistillObjective::SampledGap
}

impl MethodSpec {
    /// Method-specific defaults (group size and clip shared across methods;
    /// lambda/beta per method).
    pub fn defaults(method: Method) -> Self {
        let base = Self {
            method,
            lambda: 0.0,
            alpha_kl: 0.01,
            eps_lo: 0.2,
            eps_hi: 0.2,
            c_dual: 3.0,
            eps_w: 0.2,
            gate: GateSpec::none(),
            kl_estimator: KlEstimator::K3,
            retrieval: RetrievalStrategy::Km,
            distill: DistillObjective::SampledGap,
        };
        match method {
            Method::Grpo | Method::SkillGrpo | Method::Opsd => base,
            Method::GrpoPlusOpsd => Self { lambda: 0.01, ..base },
            Method::SkillSd => Self { lambda: 0.001, ..base },
            Method::Rlsd => Self { lambda: 0.5, ..base },
            Method::Sdar => Self { lambda: 0.01, gate: GateSpec::gap(5.0), ..base },
        }
    }

    pub fn needs_grpo(&self) -> bool {
        !matches!(self.method, Method::Opsd)
    }

    pub fn needs_old(&self) -> bool {
        self.needs_grpo() || matches!(self.method, Method::SkillSd)
    }

    pub fn needs_teacher(&self) -> bool {
        matches!(self.method, Method::SkillSd | Method::Rlsd | Method::Sdar)
    }

    pub fn needs_reference(&self) -> bool {
        matches!(
            self.method,
            Method::Grpo | Method::SkillGrpo | Method::Opsd | Method::GrpoPlusOpsd | Method::Sdar
        )
    }

    /// Skill retrieval feeds the student prompt (Skill-GRPO) or the teacher
    /// branch (distillation hybrids).
    pub fn needs_retrieval(&self) -> bool {
        matches!(
            self.method,
            Method::SkillGrpo | Method::SkillSd | Method::Rlsd | Method::Sdar
        )
    }

    pub fn skill_in_student_prompt(&self) -> bool {
        matches!(self.method, Method::SkillGrpo)
    }

    /// Full-vocabulary distillation needs raw per-token logits stored.
    pub fn needs_full_logits(&self) -> bool {
        matches!(self.method, Method::Sdar) && self.distill != DistillObjective::SampledGap
    }
}

/// Gap histogram: 41 uniform bins over [-5, 5] plus two overflow bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl GapHistogram {
    pub const BINS: usize = 41;

    pub fn new() -> Self {
        Self { lo: -5.0, hi: 5.0, counts: vec![0; Self::BINS], underflow: 0, overflow: 0 }
    }

    pub fn add(&mut self, x: f64) {
        if x < self.lo {
            self.underflow += 1;
        } else if x > self.hi {
            self.overflow += 1;
        } else {
            let width = (self.hi - self.lo) / Self::BINS as f64;
            let idx = (((x - self.lo) / width) as usize).min(Self::BINS - 1);
            self.counts[idx] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let width = (self.hi - self.lo) / Self::BINS as f64;
        (0..=Self::BINS).map(|i| self.lo + i as f64 * width).collect()
    }
}

impl Default for GapHistogram {
    fn default() -> Self {
        Self::new()
    }
}

/// Scalar decomposition of one composed loss plus token statistics.
/// `total = grpo + alpha_kl * kl_ref + lambda * distill` holds exactly for
/// every composition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub grpo: f64,
    pub kl_ref: f64,
    pub distill: f64,
    pub gap_mean: Option<f64>,
    pub gate_mean: Option<f64>,
    /// Fraction of masked tokens with gate above 0.5.
    pub gate_active_ratio: Option<f64>,
    /// Mean gap per turn index; None for turns without tokens.
    pub per_turn_gap: Vec<Option<f64>>,
    pub gap_histogram: GapHistogram,
}

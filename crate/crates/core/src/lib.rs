//! Desk-scale laboratory for token-gated on-policy self-distillation layered
//! on group-relative policy optimization.
//!
//! A small tanh policy interacts with synthetic multi-turn token
//! environments; a privileged teacher branch (same parameters, extra
//! retrieved skill context) supplies per-token guidance that is folded into
//! training through a detached sigmoid gate. The crate ships the SDAR
//! objective plus the GRPO / OPSD / Skill-GRPO / GRPO+OPSD / Skill-SD / RLSD
//! baselines, hand-derived gradients with finite-difference verification,
//! a UCB1 skill-retrieval bandit, the training loop, and an executable
//! proposition-check suite.

pub mod env;
pub mod losses;
pub mod numkit;
pub mod policy;
pub mod propcheck;
pub mod skillbank;
pub mod trainer;

pub use env::{Catalog, EnvKind, Observation, SkillText, Task, TokenId, Vocab};
pub use losses::{GateSpec, GateStrategy, LossReport, Method, MethodSpec};
pub use numkit::{RealVec, RngStream};
pub use policy::{PolicyParams, PolicySnapshot, Trajectory};
pub use skillbank::{RetrievalStrategy, SkillBank};
pub use trainer::{RolloutGroup, TrainConfig};

//! The teacher-student gap and the token-level sigmoid gates. Gates are
//! detached: they scale the distillation signal but never carry gradient.

use super::{GateSpec, GateStrategy};
use crate::numkit::sigmoid;

/// Detached teacher-student log-probability gap on the sampled token.
pub fn gap(teacher_lp: f64, student_lp: f64) -> f64 {
    teacher_lp - student_lp
}

/// Gate value in (0,1) (exactly 1 under strategy `none`). `ln_v` normalizes
/// the entropy when `normalize_entropy` is set; the raw entropy is used
/// otherwise.
pub fn gate_value(spec: &GateSpec, delta: f64, entropy: f64, ln_v: f64) -> f64 {
    let h = if spec.normalize_entropy { entropy / ln_v } else { entropy };
    match spec.strategy {
        GateStrategy::None => 1.0,
        GateStrategy::Entropy => sigmoid(spec.beta * h),
        GateStrategy::Gap => sigmoid(spec.beta * delta),
        GateStrategy::SoftOr => sigmoid(spec.beta * (1.0 - (1.0 - h) * (1.0 - delta))),
    }
}

//! Method compositions: assemble the per-method total loss, the gradient
//! terms the trainer feeds through the backward pass, and the loss report.
//!
//! The scalar identity `total = grpo + alpha_kl * kl_ref + lambda * distill`
//! holds bit-exactly for every method (absent components are zero).

use super::distill::{full_dist_divergence, kl_ref, sdar_signals, sdar_value_frozen, skill_sd_loss, DivergenceKind};
use super::grpo::{grpo_loss, rlsd_reweight, Advantages};
use super::{DistillObjective, GapHistogram, LossError, LossReport, Method, MethodSpec};
use crate::numkit::{masked_mean, RealVec};
use crate::trainer::RolloutGroup;

/// One gradient contribution. Scales (lambda, alpha_kl, group averaging) are
/// already folded into the weights; the backward pass only applies the
/// per-trajectory masked average.
#[derive(Debug, Clone)]
pub enum GradTerm {
    /// `Agg(w_t * log pi_theta(y_t | s_t))` on the student branch.
    Weighted { group: usize, traj: usize, weights: Vec<f64> },
    /// `Agg(f_t(z_t))` with explicit per-token logit gradients.
    LogitSpace { group: usize, traj: usize, dlogits: Vec<RealVec> },
}

#[derive(Debug, Clone)]
pub struct ComposeOut {
    pub total: f64,
    pub terms: Vec<GradTerm>,
    pub report: LossReport,
    /// Gate values actually applied, `[group][traj][token]`; empty for
    /// methods without a gated distillation term.
    pub gates: Vec<Vec<Vec<f64>>>,
}

pub fn compose(spec: &MethodSpec, batch: &[RolloutGroup], v: usize) -> Result<ComposeOut, LossError> {
    compose_with_gates(spec, batch, v, None)
}

fn mask_logits(logits: &[f64], allowed: u64) -> RealVec {
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if allowed >> i & 1 == 1 { z } else { f64::NEG_INFINITY })
        .collect()
}

fn divergence_kind(obj: DistillObjective) -> Option<DivergenceKind> {
    match obj {
        DistillObjective::SampledGap => None,
        DistillObjective::ReverseKl => Some(DivergenceKind::ReverseKl),
        DistillObjective::ForwardKl => Some(DivergenceKind::ForwardKl),
        DistillObjective::Jsd => Some(DivergenceKind::Jsd),
    }
}

/// Compose with optionally frozen gates. The gate is detached by
/// construction, so re-evaluations at perturbed parameters (finite
/// differences) must pass the base gates back in; `None` computes them from
/// the batch.
pub fn compose_with_gates(
    spec: &MethodSpec,
    batch: &[RolloutGroup],
    v: usize,
    frozen_gates: Option<&[Vec<Vec<f64>>]>,
) -> Result<ComposeOut, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyMask);
    }
    validate_branches(spec, batch)?;
    let n_groups = batch.len() as f64;
    let ln_v = (v as f64).ln();
    let mut terms: Vec<GradTerm> = Vec::new();

    // --- clipped-surrogate policy component ---
    let mut grpo_value = 0.0;
    if spec.needs_grpo() {
        for (gi, group) in batch.iter().enumerate() {
            let g_size = group.trajectories.len() as f64;
            let advantages = if spec.method == Method::Rlsd {
                let per_token = group
                    .trajectories
                    .iter()
                    .enumerate()
                    .map(|(i, traj)| {
                        let teacher = traj.teacher_lp.as_ref().expect("validated");
                        let old = traj.old_lp.as_ref().expect("validated");
                        let deltas: Vec<f64> =
                            teacher.iter().zip(old).map(|(t, o)| t - o).collect();
                        rlsd_reweight(group.advantages[i], &deltas, spec.eps_w, spec.lambda)
                    })
                    .collect();
                Advantages::PerToken(per_token)
            } else {
                Advantages::PerTraj(group.advantages.clone())
            };
            let (loss, weights) =
                grpo_loss(&group.trajectories, &advantages, spec.eps_lo, spec.eps_hi, spec.c_dual)?;
            grpo_value += loss / n_groups;
            let scale = 1.0 / (n_groups * g_size);
            for (ti, mut w) in weights.into_iter().enumerate() {
                if w.iter().any(|&x| x != 0.0) {
                    w.iter_mut().for_each(|x| *x *= scale);
                    terms.push(GradTerm::Weighted { group: gi, traj: ti, weights: w });
                }
            }
        }
    }

    // --- reference-KL component (also reused by the GRPO+OPSD distill) ---
    let kl_in_loss = spec.needs_reference();
    let mut kl_value = 0.0;
    let mut kl_weights: Vec<Vec<Vec<f64>>> = Vec::new();
    if kl_in_loss {
        for group in batch.iter() {
            let g_size = group.trajectories.len() as f64;
            let mut per_traj = Vec::new();
            for traj in &group.trajectories {
                let (val, w) = kl_ref(traj, spec.kl_estimator)?;
                kl_value += val / (n_groups * g_size);
                per_traj.push(w);
            }
            kl_weights.push(per_traj);
        }
        if spec.alpha_kl != 0.0 {
            for (gi, group) in batch.iter().enumerate() {
                let scale = spec.alpha_kl / (n_groups * group.trajectories.len() as f64);
                for (ti, w) in kl_weights[gi].iter().enumerate() {
                    let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
                    terms.push(GradTerm::Weighted { group: gi, traj: ti, weights: scaled });
                }
            }
        }
    }

    // --- distillation component ---
    let mut distill_value = 0.0;
    let mut gates_out: Vec<Vec<Vec<f64>>> = Vec::new();
    match spec.method {
        Method::Sdar => {
            let kind = divergence_kind(spec.distill);
            for (gi, group) in batch.iter().enumerate() {
                let g_size = group.trajectories.len() as f64;
                let scale = spec.lambda / (n_groups * g_size);
                let mut group_gates = Vec::new();
                for (ti, traj) in group.trajectories.iter().enumerate() {
                    let gates: Vec<f64> = match frozen_gates {
                        Some(f) => f[gi][ti].clone(),
                        None => sdar_signals(traj, &spec.gate, ln_v)?.gate,
                    };
                    match kind {
                        None => {
                            distill_value += sdar_value_frozen(traj, &gates)? / (n_groups * g_size);
                            if spec.lambda != 0.0 {
                                let weights: Vec<f64> = gates
                                    .iter()
                                    .zip(&traj.mask)
                                    .map(|(&g, &m)| if m { -g * scale } else { 0.0 })
                                    .collect();
                                terms.push(GradTerm::Weighted { group: gi, traj: ti, weights });
                            }
                        }
                        Some(kind) => {
                            let s_logits =
                                traj.student_logits.as_ref().ok_or(LossError::MissingBranch("student_logits"))?;
                            let t_logits =
                                traj.teacher_logits.as_ref().ok_or(LossError::MissingBranch("teacher_logits"))?;
                            let mut gated = vec![0.0; traj.len()];
                            let mut dlogits: Vec<RealVec> = vec![vec![0.0; v]; traj.len()];
                            for t in 0..traj.len() {
                                if !traj.mask[t] {
                                    continue;
                                }
                                let (d_val, d_grad) = full_dist_divergence(
                                    &mask_logits(&s_logits[t], traj.allowed[t]),
                                    &mask_logits(&t_logits[t], traj.allowed[t]),
                                    kind,
                                )?;
                                gated[t] = gates[t] * d_val;
                                if spec.lambda != 0.0 {
                                    dlogits[t] =
                                        d_grad.iter().map(|g| g * gates[t] * scale).collect();
                                }
                            }
                            distill_value +=
                                masked_mean(&gated, &traj.mask).map_err(|_| LossError::EmptyMask)?
                                    / (n_groups * g_size);
                            if spec.lambda != 0.0 {
                                terms.push(GradTerm::LogitSpace { group: gi, traj: ti, dlogits });
                            }
                        }
                    }
                    group_gates.push(gates);
                }
                gates_out.push(group_gates);
            }
        }
        Method::SkillSd => {
            for (gi, group) in batch.iter().enumerate() {
                let g_size = group.trajectories.len() as f64;
                let scale = spec.lambda / (n_groups * g_size);
                for (ti, traj) in group.trajectories.iter().enumerate() {
                    let (val, w) = skill_sd_loss(traj)?;
                    distill_value += val / (n_groups * g_size);
                    if spec.lambda != 0.0 {
                        let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
                        terms.push(GradTerm::Weighted { group: gi, traj: ti, weights: scaled });
                    }
                }
            }
        }
        Method::GrpoPlusOpsd => {
            // Un-gated auxiliary distillation toward pi_ref, weighted by
            // lambda on top of the alpha_kl reference penalty.
            distill_value = kl_value;
            if spec.lambda != 0.0 {
                for (gi, group) in batch.iter().enumerate() {
                    let scale = spec.lambda / (n_groups * group.trajectories.len() as f64);
                    for (ti, w) in kl_weights[gi].iter().enumerate() {
                        let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
                        terms.push(GradTerm::Weighted { group: gi, traj: ti, weights: scaled });
                    }
                }
            }
        }
        _ => {}
    }

    let kl_component = if kl_in_loss { kl_value } else { 0.0 };
    let total = grpo_value + spec.alpha_kl * kl_component + spec.lambda * distill_value;
    let report = build_report(
        spec,
        batch,
        ln_v,
        total,
        grpo_value,
        kl_component,
        distill_value,
        &gates_out,
    );
    Ok(ComposeOut { total, terms, report, gates: gates_out })
}

fn validate_branches(spec: &MethodSpec, batch: &[RolloutGroup]) -> Result<(), LossError> {
    for group in batch {
        if group.trajectories.len() != group.advantages.len() {
            return Err(LossError::ShapeMismatch {
                expected: group.trajectories.len(),
                got: group.advantages.len(),
            });
        }
        for traj in &group.trajectories {
            if traj.masked_count() == 0 {
                return Err(LossError::EmptyMask);
            }
            if spec.needs_old() && traj.old_lp.is_none() {
                return Err(LossError::MissingBranch("old"));
            }
            if spec.needs_teacher() && traj.teacher_lp.is_none() {
                return Err(LossError::MissingBranch("teacher"));
            }
            if spec.needs_reference() && traj.ref_lp.is_none() {
                return Err(LossError::MissingBranch("reference"));
            }
            if spec.needs_full_logits()
                && (traj.student_logits.is_none() || traj.teacher_logits.is_none())
            {
                return Err(LossError::MissingBranch("full_logits"));
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    spec: &MethodSpec,
    batch: &[RolloutGroup],
    _ln_v: f64,
    total: f64,
    grpo: f64,
    kl_ref: f64,
    distill: f64,
    gates: &[Vec<Vec<f64>>],
) -> LossReport {
    let teacher_everywhere = batch
        .iter()
        .flat_map(|g| &g.trajectories)
        .all(|t| t.teacher_lp.is_some());
    let mut gap_mean = None;
    let mut per_turn_gap = Vec::new();
    let mut histogram = GapHistogram::new();
    if teacher_everywhere {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut turn_sums: Vec<(f64, usize)> = Vec::new();
        for group in batch {
            for traj in &group.trajectories {
                let teacher = traj.teacher_lp.as_ref().expect("teacher present");
                for t in 0..traj.len() {
                    if !traj.mask[t] {
                        continue;
                    }
                    let delta = teacher[t] - traj.student_lp[t];
                    sum += delta;
                    count += 1;
                    histogram.add(delta);
                    let turn = traj.turn_of[t];
                    if turn_sums.len() <= turn {
                        turn_sums.resize(turn + 1, (0.0, 0));
                    }
                    turn_sums[turn].0 += delta;
                    turn_sums[turn].1 += 1;
                }
            }
        }
        if count > 0 {
            gap_mean = Some(sum / count as f64);
        }
        per_turn_gap = turn_sums
            .iter()
            .map(|&(s, n)| if n > 0 { Some(s / n as f64) } else { None })
            .collect();
    }

    let (mut gate_mean, mut gate_active_ratio) = (None, None);
    if spec.method == Method::Sdar && !gates.is_empty() {
        let mut g_sum = 0.0;
        let mut active = 0usize;
        let mut count = 0usize;
        for (gi, group) in batch.iter().enumerate() {
            for (ti, traj) in group.trajectories.iter().enumerate() {
                for t in 0..traj.len() {
                    if !traj.mask[t] {
                        continue;
                    }
                    let g = gates[gi][ti][t];
                    g_sum += g;
                    count += 1;
                    if g > 0.5 {
                        active += 1;
                    }
                }
            }
        }
        if count > 0 {
            gate_mean = Some(g_sum / count as f64);
            gate_active_ratio = Some(active as f64 / count as f64);
        }
    }

    LossReport {
        total,
        grpo,
        kl_ref,
        distill,
        gap_mean,
        gate_mean,
        gate_active_ratio,
        per_turn_gap,
        gap_histogram: histogram,
    }
}

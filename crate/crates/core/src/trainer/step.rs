//! One optimization step: compose the method loss, assemble the exact
//! gradient from the weight terms, optionally clip, and apply Adam.

use super::{Adam, RolloutGroup, TrainError};
use crate::losses::{compose, GradTerm, LossReport, MethodSpec};
use crate::numkit::RealVec;
use crate::policy::{backward_logit_terms, backward_weighted_logprob, Branch, PolicyParams};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    /// 2-norm of the assembled gradient before any clipping.
    pub grad_norm: f64,
}

/// Assemble the exact total gradient from compose's terms. Weighted terms
/// addressing the same trajectory are additive and get merged so each
/// trajectory's features are walked once.
pub fn assemble_gradient(
    params: &PolicyParams,
    batch: &[RolloutGroup],
    terms: &[GradTerm],
) -> Result<crate::policy::Gradient, TrainError> {
    let mut merged: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut logit_terms: Vec<(usize, usize, &Vec<RealVec>)> = Vec::new();
    for term in terms {
        match term {
            GradTerm::Weighted { group, traj, weights } => {
                merged
                    .entry((*group, *traj))
                    .and_modify(|acc| {
                        for (a, w) in acc.iter_mut().zip(weights) {
                            *a += w;
                        }
                    })
                    .or_insert_with(|| weights.clone());
            }
            GradTerm::LogitSpace { group, traj, dlogits } => {
                logit_terms.push((*group, *traj, dlogits));
            }
        }
    }

    let mut grad = params.zeros_grad();
    for ((group, traj), weights) in &merged {
        let t = &batch[*group].trajectories[*traj];
        let g = backward_weighted_logprob(params, t, Branch::Student, weights)?;
        grad.add_scaled(&g, 1.0);
    }
    for (group, traj, dlogits) in &logit_terms {
        let t = &batch[*group].trajectories[*traj];
        let g = backward_logit_terms(params, t, Branch::Student, dlogits)?;
        grad.add_scaled(&g, 1.0);
    }
    Ok(grad)
}

pub fn train_step(
    params: &mut PolicyParams,
    optim: &mut Adam,
    batch: &[RolloutGroup],
    spec: &MethodSpec,
    grad_clip: Option<f64>,
    step: usize,
) -> Result<StepOutput, TrainError> {
    let out = compose(spec, batch, params.v)?;
    if !out.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            detail: format!(
                "total={} grpo={} kl_ref={} distill={}",
                out.total, out.report.grpo, out.report.kl_ref, out.report.distill
            ),
        });
    }

    let grad = assemble_gradient(params, batch, &out.terms)?;
    let grad_norm = grad.l2_norm();
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFiniteLoss { step, detail: "non-finite gradient".into() });
    }
    let mut grad = grad;
    if let Some(c) = grad_clip {
        if grad_norm > c {
            grad.scale(c / grad_norm);
        }
    }
    optim.update(params, &grad);
    if !params.block.all_finite() {
        return Err(TrainError::NonFiniteLoss { step, detail: "non-finite parameters".into() });
    }
    Ok(StepOutput { report: out.report, grad_norm })
}

//! Rollout-group collection: one retrieval per task, G independent rollouts,
//! branch rescoring per the method's needs, and bandit reward feedback.

use super::{retrieval_stream, rollout_stream, RolloutGroup, TrainError};
use crate::env::Catalog;
use crate::losses::{group_advantages, MethodSpec};
use crate::numkit::RngStream;
use crate::policy::{rescore, rescore_logits, rollout, PolicyParams, PolicySnapshot, RescoreMode};
use crate::skillbank::SkillBank;

/// Collect G trajectories for `task_id`, fill the branch log-probs the
/// method requires, and feed terminal rewards back to the bank when a single
/// skill entry was retrieved.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    params: &PolicyParams,
    catalog: &Catalog,
    task_id: &str,
    spec: &MethodSpec,
    bank: &mut SkillBank,
    ref_snapshot: Option<&PolicySnapshot>,
    group_size: usize,
    seed: u64,
    step: usize,
    task_idx: usize,
) -> Result<RolloutGroup, TrainError> {
    let entry = catalog.find(task_id)?;
    let task_type = entry.task.task_type.clone();
    let description = entry.task.description.clone();

    let retrieved = if spec.needs_retrieval() {
        let mut rng = RngStream::new(seed, retrieval_stream(step, task_idx));
        bank.select(spec.retrieval, &task_type, &description, &catalog.vocab, &mut rng)?
    } else {
        None
    };
    let (skill, skill_id) = match &retrieved {
        Some((skill, id)) => (Some(skill), *id),
        None => (None, None),
    };

    let mut trajectories = Vec::with_capacity(group_size);
    for member in 0..group_size {
        let mut rng = RngStream::new(seed, rollout_stream(step, task_idx, member));
        let student_skill = if spec.skill_in_student_prompt() { skill } else { None };
        let mut traj = rollout(params, catalog, task_id, student_skill, &mut rng, false)?;
        traj.skill_id = skill_id;

        // theta_old is theta at batch start, so recorded log-probs are the
        // old-policy log-probs (bit-equal to a snapshot rescore).
        if spec.needs_old() {
            traj.old_lp = Some(traj.student_lp.clone());
        }
        if spec.needs_teacher() {
            let skill = skill.ok_or(TrainError::Config(
                "retrieval returned no skill for a teacher-based method".into(),
            ))?;
            traj.teacher_skill = Some(skill.tokens.clone());
            traj.teacher_lp = Some(rescore(params, &traj, RescoreMode::Teacher)?);
        }
        if spec.needs_reference() {
            let snap = ref_snapshot.ok_or(TrainError::Config(
                "method requires a reference snapshot".into(),
            ))?;
            traj.ref_lp = Some(rescore(params, &traj, RescoreMode::Snapshot(snap))?);
        }
        if spec.needs_full_logits() {
            traj.student_logits = Some(rescore_logits(params, &traj, RescoreMode::Student)?);
            traj.teacher_logits = Some(rescore_logits(params, &traj, RescoreMode::Teacher)?);
        }
        trajectories.push(traj);
    }

    if let Some(id) = skill_id {
        for traj in &trajectories {
            bank.update_reward(id, traj.reward)?;
        }
    }

    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
    let advantages = group_advantages(&rewards)?;
    Ok(RolloutGroup {
        task_id: task_id.to_string(),
        task_type,
        trajectories,
        advantages,
        skill_id,
    })
}

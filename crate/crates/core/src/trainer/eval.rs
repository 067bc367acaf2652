//! Greedy evaluation over a task list, optionally with KM-retrieved skills
//! injected into the student prompt.

use super::{eval_stream, TrainError};
use crate::env::Catalog;
use crate::numkit::RngStream;
use crate::policy::{rollout, PolicyParams};
use crate::skillbank::SkillBank;

/// Success rate (fraction of tasks reaching reward 1 under greedy decoding)
/// and per-task outcomes. `with_skills` injects each task's KM-retrieved
/// skill into the student prompt; tasks without a keyword match run bare.
pub fn evaluate(
    params: &PolicyParams,
    catalog: &Catalog,
    tasks: &[String],
    bank: &SkillBank,
    with_skills: bool,
    seed: u64,
    step: usize,
) -> Result<(f64, Vec<(String, f64)>), TrainError> {
    let mut outcomes = Vec::with_capacity(tasks.len());
    let mut successes = 0usize;
    for (idx, task_id) in tasks.iter().enumerate() {
        let entry = catalog.find(task_id)?;
        let skill = if with_skills {
            bank.km_select(&entry.task.description, &catalog.vocab)?
                .map(|id| bank.entry(id).expect("entry exists").skill.clone())
        } else {
            None
        };
        let mut rng = RngStream::new(seed, eval_stream(step, idx));
        let traj = rollout(params, catalog, task_id, skill.as_ref(), &mut rng, true)?;
        if traj.reward == 1.0 {
            successes += 1;
        }
        outcomes.push((task_id.clone(), traj.reward));
    }
    let rate = if tasks.is_empty() { 0.0 } else { successes as f64 / tasks.len() as f64 };
    Ok((rate, outcomes))
}

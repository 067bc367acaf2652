//! Episode rollout under prefix-constrained sampling, the flattened
//! trajectory record, and branch rescoring.
//!
//! Decoding is constrained to the admissible-action prefix trie: at each
//! within-turn position only tokens continuing some admissible action are
//! sampleable, and recorded log-probs/entropies are taken under that masked
//! softmax (the exact sampling distribution). The per-position allowed mask
//! is stored so teacher/old/reference rescoring uses identical support.

use super::{
    featurize, masked_log_softmax, FeatureCtx, PolicyError, PolicyParams, PolicySnapshot,
};
use crate::env::{Catalog, SkillText, TokenId, END, L_RESP};
use crate::numkit::{entropy_from_logprobs, RealVec, RngStream};

/// Flattened response-token record of one multi-turn episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub task_id: String,
    pub task_type: String,
    pub task_desc: Vec<TokenId>,
    pub horizon: usize,
    /// Observation tokens at the start of each turn (indexed by turn).
    pub turn_obs: Vec<Vec<TokenId>>,
    pub tokens: Vec<TokenId>,
    /// Response mask; all emitted tokens are valid response tokens here.
    pub mask: Vec<bool>,
    pub turn_of: Vec<usize>,
    pub pos_of: Vec<usize>,
    /// Admissible-token bitmask per position (bit i = token i allowed).
    pub allowed: Vec<u64>,
    pub student_lp: Vec<f64>,
    pub student_h: Vec<f64>,
    pub old_lp: Option<Vec<f64>>,
    pub teacher_lp: Option<Vec<f64>>,
    pub ref_lp: Option<Vec<f64>>,
    /// Raw (unmasked) per-token logits, kept only when a full-distribution
    /// distillation objective needs them.
    pub student_logits: Option<Vec<RealVec>>,
    pub teacher_logits: Option<Vec<RealVec>>,
    pub reward: f64,
    /// Skill visible to the student prompt (skill-in-prompt modes).
    pub student_skill: Option<Vec<TokenId>>,
    /// Privileged skill for the teacher branch.
    pub teacher_skill: Option<Vec<TokenId>>,
    pub skill_id: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Tokens emitted earlier in the same turn as position `t`.
    pub fn turn_prefix(&self, t: usize) -> &[TokenId] {
        let start = t - self.pos_of[t];
        &self.tokens[start..t]
    }
}

/// Which featurization a log-prob evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

/// Rescoring context: current params on either branch, or a frozen snapshot
/// on the student branch.
#[derive(Debug, Clone, Copy)]
pub enum RescoreMode<'a> {
    Student,
    Teacher,
    Snapshot(&'a PolicySnapshot),
}

/// Tokens that extend `prefix` toward some admissible action, as a bitmask.
pub fn allowed_next(admissible: &[Vec<TokenId>], prefix: &[TokenId]) -> u64 {
    let mut mask = 0u64;
    for action in admissible {
        if action.len() > prefix.len() && action[..prefix.len()] == *prefix {
            mask |= 1 << action[prefix.len()];
        }
    }
    mask
}

fn sample_masked(lps: &[f64], allowed: u64, rng: &mut RngStream, greedy: bool) -> TokenId {
    if greedy {
        let mut best = None;
        for (i, &lp) in lps.iter().enumerate() {
            if allowed >> i & 1 == 1 {
                match best {
                    None => best = Some((i, lp)),
                    Some((_, b)) if lp > b => best = Some((i, lp)),
                    _ => {}
                }
            }
        }
        return best.expect("non-empty support").0 as TokenId;
    }
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &lp) in lps.iter().enumerate() {
        if allowed >> i & 1 == 1 {
            cum += lp.exp();
            last = i;
            if u < cum {
                return i as TokenId;
            }
        }
    }
    last as TokenId
}

/// Features of position `t` on the requested branch.
fn features_at(
    v: usize,
    traj: &Trajectory,
    t: usize,
    branch: Branch,
) -> Result<RealVec, PolicyError> {
    let skill: Option<&[TokenId]> = match branch {
        Branch::Student => traj.student_skill.as_deref(),
        Branch::Teacher => Some(
            traj.teacher_skill
                .as_deref()
                .ok_or(PolicyError::MissingSkill)?,
        ),
    };
    featurize(
        v,
        &FeatureCtx {
            task_desc: &traj.task_desc,
            obs_tokens: &traj.turn_obs[traj.turn_of[t]],
            skill,
            emitted_this_turn: traj.turn_prefix(t),
            turn_index: traj.turn_of[t],
            within_pos: traj.pos_of[t],
            horizon: traj.horizon,
        },
    )
}

/// All per-position feature vectors of one branch. Features are independent
/// of the parameters, so hot loops (finite differences) compute them once.
pub fn branch_features(
    v: usize,
    traj: &Trajectory,
    branch: Branch,
) -> Result<Vec<RealVec>, PolicyError> {
    (0..traj.len()).map(|t| features_at(v, traj, t, branch)).collect()
}

/// Masked log-prob of each recorded token given precomputed features.
pub fn logprobs_from_features(
    params: &PolicyParams,
    traj: &Trajectory,
    feats: &[RealVec],
) -> Result<Vec<f64>, PolicyError> {
    let mut out = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let logits = params.forward(&feats[t])?;
        let lps = masked_log_softmax(&logits, traj.allowed[t])?;
        out.push(lps[traj.tokens[t] as usize]);
    }
    Ok(out)
}

/// Re-evaluate per-token log-probs on the requested branch. Never mutates
/// parameters; snapshot modes evaluate student features under frozen params.
pub fn rescore(
    params: &PolicyParams,
    traj: &Trajectory,
    mode: RescoreMode,
) -> Result<Vec<f64>, PolicyError> {
    let (p, branch) = match mode {
        RescoreMode::Student => (params, Branch::Student),
        RescoreMode::Teacher => (params, Branch::Teacher),
        RescoreMode::Snapshot(snap) => (snap.params(), Branch::Student),
    };
    let feats = branch_features(p.v, traj, branch)?;
    logprobs_from_features(p, traj, &feats)
}

/// Raw (unmasked) per-token logits on the requested branch.
pub fn rescore_logits(
    params: &PolicyParams,
    traj: &Trajectory,
    mode: RescoreMode,
) -> Result<Vec<RealVec>, PolicyError> {
    let (p, branch) = match mode {
        RescoreMode::Student => (params, Branch::Student),
        RescoreMode::Teacher => (params, Branch::Teacher),
        RescoreMode::Snapshot(snap) => (snap.params(), Branch::Student),
    };
    let feats = branch_features(p.v, traj, branch)?;
    feats.iter().map(|f| p.forward(f)).collect()
}

/// Roll out one episode. Per turn, up to `L_RESP + 1` tokens are sampled
/// autoregressively from the masked softmax (stop at END) and the completed
/// action is submitted to the environment. Deterministic in
/// `(params, task, rng stream)`.
pub fn rollout(
    params: &PolicyParams,
    catalog: &Catalog,
    task_id: &str,
    student_skill: Option<&SkillText>,
    rng: &mut RngStream,
    greedy: bool,
) -> Result<Trajectory, PolicyError> {
    let entry = catalog.find(task_id)?;
    let task = &entry.task;
    let (mut env, mut obs) = catalog.reset(task_id, rng)?;
    let skill_tokens = student_skill.map(|s| s.tokens.clone());

    let mut traj = Trajectory {
        task_id: task.task_id.clone(),
        task_type: task.task_type.clone(),
        task_desc: task.description.clone(),
        horizon: task.horizon,
        turn_obs: Vec::new(),
        tokens: Vec::new(),
        mask: Vec::new(),
        turn_of: Vec::new(),
        pos_of: Vec::new(),
        allowed: Vec::new(),
        student_lp: Vec::new(),
        student_h: Vec::new(),
        old_lp: None,
        teacher_lp: None,
        ref_lp: None,
        student_logits: None,
        teacher_logits: None,
        reward: 0.0,
        student_skill: skill_tokens,
        teacher_skill: None,
        skill_id: None,
    };

    while !env.done() {
        let turn = env.turn_index();
        traj.turn_obs.push(obs.tokens.clone());
        let admissible = &obs.admissible;
        let mut emitted: Vec<TokenId> = Vec::new();
        for pos in 0..=L_RESP {
            let allowed = allowed_next(admissible, &emitted);
            if allowed == 0 {
                break; // prefix completed an action without END (not reachable for well-formed catalogs)
            }
            let feat = featurize(
                params.v,
                &FeatureCtx {
                    task_desc: &traj.task_desc,
                    obs_tokens: &traj.turn_obs[turn],
                    skill: traj.student_skill.as_deref(),
                    emitted_this_turn: &emitted,
                    turn_index: turn,
                    within_pos: pos,
                    horizon: traj.horizon,
                },
            )?;
            let logits = params.forward(&feat)?;
            let lps = masked_log_softmax(&logits, allowed)?;
            let token = sample_masked(&lps, allowed, rng, greedy);
            traj.tokens.push(token);
            traj.mask.push(true);
            traj.turn_of.push(turn);
            traj.pos_of.push(pos);
            traj.allowed.push(allowed);
            traj.student_lp.push(lps[token as usize]);
            traj.student_h.push(entropy_from_logprobs(&lps));
            emitted.push(token);
            if token == END {
                break;
            }
        }
        let out = env.step(&emitted)?;
        traj.reward += out.reward;
        obs = out.obs;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Catalog, EnvKind};
    use crate::policy::SnapshotRole;

    fn catalog() -> Catalog {
        Catalog::builtin(EnvKind::TreasureRooms)
    }

    fn sample_traj(seed: u64) -> (PolicyParams, Catalog, Trajectory) {
        let cat = catalog();
        let params = PolicyParams::init(64, 32, seed);
        let mut rng = RngStream::new(seed, 5);
        let traj = rollout(&params, &cat, "put_key_box", None, &mut rng, false).unwrap();
        (params, cat, traj)
    }

    #[test]
    fn allowed_next_follows_prefix_trie() {
        let adm = vec![vec![3, 7, END], vec![3, 8, END], vec![4, 10, END]];
        assert_eq!(allowed_next(&adm, &[]), (1 << 3) | (1 << 4));
        assert_eq!(allowed_next(&adm, &[3]), (1 << 7) | (1 << 8));
        assert_eq!(allowed_next(&adm, &[3, 7]), 1 << END);
        assert_eq!(allowed_next(&adm, &[9]), 0);
    }

    #[test]
    fn rollout_is_deterministic() {
        let (_, _, a) = sample_traj(7);
        let (_, _, b) = sample_traj(7);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.student_lp, b.student_lp);
        assert_eq!(a.reward, b.reward);
    }

    #[test]
    fn zero_params_sample_uniform_over_admissible() {
        let cat = catalog();
        let params = PolicyParams::zeros(64, 16);
        let mut rng = RngStream::new(1, 0);
        let traj = rollout(&params, &cat, "put_key_box", None, &mut rng, false).unwrap();
        for t in 0..traj.len() {
            let k = traj.allowed[t].count_ones() as f64;
            assert!((traj.student_lp[t] + k.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_length_bound_holds() {
        for seed in 0..8 {
            let (_, _, traj) = sample_traj(seed);
            assert!(traj.len() <= traj.horizon * (L_RESP + 1));
            let turns = traj.turn_obs.len();
            assert!(turns <= traj.horizon);
        }
    }

    #[test]
    fn rescore_student_matches_recorded_bit_for_bit() {
        let (params, _, traj) = sample_traj(11);
        let re = rescore(&params, &traj, RescoreMode::Student).unwrap();
        assert_eq!(re, traj.student_lp);
    }

    #[test]
    fn snapshot_rescore_equals_live_copy() {
        let (params, _, traj) = sample_traj(13);
        let snap = PolicySnapshot::of(&params, SnapshotRole::Old);
        let a = rescore(&params, &traj, RescoreMode::Snapshot(&snap)).unwrap();
        let b = rescore(&params, &traj, RescoreMode::Student).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_skill_teacher_equals_student() {
        let (params, _, mut traj) = sample_traj(17);
        traj.teacher_skill = Some(vec![]);
        let teacher = rescore(&params, &traj, RescoreMode::Teacher).unwrap();
        assert_eq!(teacher, traj.student_lp);
    }

    #[test]
    fn teacher_rescore_without_skill_errors() {
        let (params, _, traj) = sample_traj(19);
        assert!(matches!(
            rescore(&params, &traj, RescoreMode::Teacher),
            Err(PolicyError::MissingSkill)
        ));
    }

    #[test]
    fn teacher_with_skill_differs_from_student() {
        let (params, cat, mut traj) = sample_traj(23);
        let skill = cat.skill_for("put_key_box").unwrap();
        traj.teacher_skill = Some(skill.tokens.clone());
        let teacher = rescore(&params, &traj, RescoreMode::Teacher).unwrap();
        assert_ne!(teacher, traj.student_lp);
    }

    #[test]
    fn greedy_rollout_is_reproducible() {
        let cat = catalog();
        let params = PolicyParams::init(64, 32, 3);
        let mut r1 = RngStream::new(9, 0);
        let mut r2 = RngStream::new(9, 0);
        let a = rollout(&params, &cat, "put_gem_desk", None, &mut r1, true).unwrap();
        let b = rollout(&params, &cat, "put_gem_desk", None, &mut r2, true).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn scripted_params_solve_lookup_by_greedy_decoding() {
        use crate::env::bfs_success_path;
        let cat = Catalog::builtin(EnvKind::LookupQa);
        // The BFS-oracle shortest success path is the single correct answer.
        let oracle = bfs_success_path(&cat, "lookup_d1_0", 0).unwrap();
        assert_eq!(oracle.len(), 1);
        let action = &oracle[0];
        // Script that action: none -> answer, answer -> value, value -> END.
        let rules = vec![
            (None, action[0]),
            (Some(action[0]), action[1]),
            (Some(action[1]), END),
        ];
        let params = super::super::scripted_params(64, 16, &rules);
        let mut rng = RngStream::new(0, 0);
        let traj = rollout(&params, &cat, "lookup_d1_0", None, &mut rng, true).unwrap();
        assert_eq!(traj.reward, 1.0);
        assert_eq!(&traj.tokens, action);
    }
}

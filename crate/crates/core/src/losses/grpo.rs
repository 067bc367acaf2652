//! Group-relative advantages, the clipped-surrogate policy loss with dual
//! clip, and RLSD token-level advantage reweighting.

use super::LossError;
use crate::numkit::masked_mean;
use crate::policy::Trajectory;

/// Standard deviation below which a reward group counts as degenerate and
/// all advantages collapse to zero.
const DEGENERATE_STD: f64 = 1e-8;

/// Group-relative advantages `(R_i - mean) / std` with population std.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, LossError> {
    if rewards.len() < 2 {
        return Err(LossError::GroupTooSmall);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-trajectory scalar advantages or per-token reweighted advantages.
#[derive(Debug, Clone)]
pub enum Advantages {
    PerTraj(Vec<f64>),
    PerToken(Vec<Vec<f64>>),
}

impl Advantages {
    fn at(&self, traj: usize, token: usize) -> f64 {
        match self {
            Advantages::PerTraj(a) => a[traj],
            Advantages::PerToken(a) => a[traj][token],
        }
    }
}

/// One token of the clipped surrogate. Returns the token loss and the weight
/// `d(loss)/d(student_lp)`, which is `-A * r` on the unclipped active branch
/// and exactly zero when the clip or dual clip saturates.
fn token_surrogate(a: f64, ratio: f64, eps_lo: f64, eps_hi: f64, c_dual: f64) -> (f64, f64) {
    let l1 = -a * ratio;
    let l2 = -a * ratio.clamp(1.0 - eps_lo, 1.0 + eps_hi);
    let (inner, inner_w) = if l1 >= l2 { (l1, -a * ratio) } else { (l2, 0.0) };
    if a >= 0.0 {
        (inner, inner_w)
    } else {
        let cap = -a * c_dual;
        if inner <= cap {
            (inner, inner_w)
        } else {
            (cap, 0.0)
        }
    }
}

/// Clipped-surrogate loss over one rollout group: mean over trajectories of
/// the masked token average. Also returns per-trajectory backward weights on
/// the student log-probs.
pub fn grpo_loss(
    trajs: &[Trajectory],
    advantages: &Advantages,
    eps_lo: f64,
    eps_hi: f64,
    c_dual: f64,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let mut total = 0.0;
    let mut weights = Vec::with_capacity(trajs.len());
    for (i, traj) in trajs.iter().enumerate() {
        let old = traj.old_lp.as_ref().ok_or(LossError::MissingOldLogprobs)?;
        if old.len() != traj.len() {
            return Err(LossError::ShapeMismatch { expected: traj.len(), got: old.len() });
        }
        let mut token_losses = vec![0.0; traj.len()];
        let mut w = vec![0.0; traj.len()];
        for t in 0..traj.len() {
            if !traj.mask[t] {
                continue;
            }
            let ratio = (traj.student_lp[t] - old[t]).exp();
            let (loss, weight) =
                token_surrogate(advantages.at(i, t), ratio, eps_lo, eps_hi, c_dual);
            token_losses[t] = loss;
            w[t] = weight;
        }
        total += masked_mean(&token_losses, &traj.mask).map_err(|_| LossError::EmptyMask)?;
        weights.push(w);
    }
    Ok((total / trajs.len() as f64, weights))
}

/// RLSD token-level advantage reweighting:
/// `w_t = clip(exp(sign(A) * delta_t), 1-eps_w, 1+eps_w)` and
/// `A_t = A * ((1-lambda) + lambda * w_t)`.
pub fn rlsd_reweight(advantage: f64, deltas: &[f64], eps_w: f64, lambda: f64) -> Vec<f64> {
    let sign = if advantage > 0.0 {
        1.0
    } else if advantage < 0.0 {
        -1.0
    } else {
        0.0
    };
    deltas
        .iter()
        .map(|d| {
            let w = (sign * d).exp().clamp(1.0 - eps_w, 1.0 + eps_w);
            advantage * ((1.0 - lambda) + lambda * w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_for_half_success_group() {
        let a = group_advantages(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        for (i, v) in a.iter().enumerate() {
            let expect = if i < 4 { 1.0 } else { -1.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_group_gives_zeros() {
        let a = group_advantages(&[0.7; 8]).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn advantages_are_standardized() {
        let a = group_advantages(&[0.3, 0.9, 0.1, 1.0, 0.0, 0.55]).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn group_too_small_rejected() {
        assert_eq!(group_advantages(&[1.0]).unwrap_err(), LossError::GroupTooSmall);
    }

    #[test]
    fn surrogate_fresh_policy_unit_advantage() {
        let (loss, w) = token_surrogate(1.0, 1.0, 0.2, 0.2, 3.0);
        assert_eq!(loss, -1.0);
        assert_eq!(w, -1.0);
    }

    #[test]
    fn surrogate_clips_high_ratio_for_positive_advantage() {
        let (loss, w) = token_surrogate(1.0, 2.0, 0.2, 0.2, 3.0);
        assert!((loss - -1.2).abs() < 1e-12);
        assert_eq!(w, 0.0);
    }

    #[test]
    fn surrogate_dual_clip_not_binding_case() {
        let (loss, w) = token_surrogate(-1.0, 2.0, 0.2, 0.2, 3.0);
        assert!((loss - 2.0).abs() < 1e-12);
        assert!((w - 2.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_dual_clip_binding_case() {
        let (loss, w) = token_surrogate(-1.0, 5.0, 0.2, 0.2, 3.0);
        assert!((loss - 3.0).abs() < 1e-12);
        assert_eq!(w, 0.0);
    }

    #[test]
    fn surrogate_low_ratio_negative_advantage_clips() {
        // A < 0, r below the band: inner max picks the clipped branch.
        let (loss, w) = token_surrogate(-1.0, 0.5, 0.2, 0.2, 3.0);
        assert!((loss - 0.8).abs() < 1e-12);
        assert_eq!(w, 0.0);
    }

    #[test]
    fn rlsd_neutral_and_clipped_reweights() {
        let a = rlsd_reweight(1.0, &[0.0], 0.2, 0.5);
        assert!((a[0] - 1.0).abs() < 1e-15);

        // Frozen oracle: exp(0.5)=1.6487 clips to 1.2 -> 1*(0.5+0.6)=1.1
        let a = rlsd_reweight(1.0, &[0.5], 0.2, 0.5);
        assert!((a[0] - 1.1).abs() < 1e-12);

        // sign(A) = -1: exp(-0.5)=0.6065 clips to 0.8 -> -1*(0.5+0.4)=-0.9
        let a = rlsd_reweight(-1.0, &[0.5], 0.2, 0.5);
        assert!((a[0] - -0.9).abs() < 1e-12);
    }

    #[test]
    fn rlsd_weights_respect_clip_band() {
        let mut rng = crate::numkit::RngStream::new(8, 0);
        for _ in 0..200 {
            let a = rng.uniform(-2.0, 2.0);
            let d = rng.uniform(-3.0, 3.0);
            let out = rlsd_reweight(a, &[d], 0.2, 0.5)[0];
            if a != 0.0 {
                let w = out / a - 0.5; // recover lambda*w with lambda=0.5
                assert!(w >= 0.5 * 0.8 - 1e-12 && w <= 0.5 * 1.2 + 1e-12);
            }
        }
    }
}

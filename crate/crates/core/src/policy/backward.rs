//! Closed-form gradients of masked-average objectives through the
//! softmax -> linear -> tanh -> linear chain.
//!
//! `backward_weighted_logprob` differentiates `Agg(w_t * log pi(y_t | s_t))`
//! with weights detached; `backward_logit_terms` differentiates
//! `Agg(f_t(z_t))` given each token's `df_t/dz` (full logit vector).
//! Both respect the stored admissible-token masks.

use super::rollout::{branch_features, Branch, Trajectory};
use super::{masked_log_softmax, Gradient, PolicyError, PolicyParams};
use crate::numkit::{NumError, RealVec};

/// Accumulate `dz^T (dz_t/dtheta)` for one token into `grad`; `dz` is sparse
/// over logit indices.
fn accumulate(
    params: &PolicyParams,
    feat: &[f64],
    act: &[f64],
    dz: &[(usize, f64)],
    grad: &mut Gradient,
) {
    let h = params.h;
    let mut dhidden = vec![0.0; h];
    for &(v, d) in dz {
        grad.b2[v] += d;
        let w2_row = &params.block.w2[v * h..(v + 1) * h];
        let g2_row = &mut grad.w2[v * h..(v + 1) * h];
        for i in 0..h {
            g2_row[i] += d * act[i];
            dhidden[i] += d * w2_row[i];
        }
    }
    let dpre: Vec<f64> = dhidden
        .iter()
        .zip(act)
        .map(|(dh, a)| dh * (1.0 - a * a))
        .collect();
    for i in 0..h {
        grad.b1[i] += dpre[i];
    }
    for (j, &x) in feat.iter().enumerate() {
        if x != 0.0 {
            let row = &mut grad.w1t[j * h..(j + 1) * h];
            for i in 0..h {
                row[i] += x * dpre[i];
            }
        }
    }
}

fn masked_probs(logits: &[f64], allowed: u64) -> Result<RealVec, NumError> {
    let lps = masked_log_softmax(logits, allowed)?;
    Ok(lps
        .iter()
        .enumerate()
        .map(|(i, &lp)| if allowed >> i & 1 == 1 { lp.exp() } else { 0.0 })
        .collect())
}

/// Exact gradient of `Agg(w_t * log pi(y_t | branch features))`; weights are
/// treated as detached constants and ignored where the mask is zero.
pub fn backward_weighted_logprob(
    params: &PolicyParams,
    traj: &Trajectory,
    branch: Branch,
    weights: &[f64],
) -> Result<Gradient, PolicyError> {
    if weights.len() != traj.len() {
        return Err(PolicyError::ShapeMismatch { expected: traj.len(), got: weights.len() });
    }
    let m = traj.masked_count();
    if m == 0 {
        return Err(PolicyError::Num(NumError::EmptyInput));
    }
    let feats = branch_features(params.v, traj, branch)?;
    let mut grad = params.zeros_grad();
    for t in 0..traj.len() {
        if !traj.mask[t] || weights[t] == 0.0 {
            continue;
        }
        let (logits, act) = params.forward_with_hidden(&feats[t])?;
        let probs = masked_probs(&logits, traj.allowed[t])?;
        let coeff = weights[t] / m as f64;
        let y = traj.tokens[t] as usize;
        let mut dz: Vec<(usize, f64)> = Vec::with_capacity(16);
        for v in 0..params.v {
            if traj.allowed[t] >> v & 1 == 1 {
                let indicator = if v == y { 1.0 } else { 0.0 };
                dz.push((v, coeff * (indicator - probs[v])));
            }
        }
        accumulate(params, &feats[t], &act, &dz, &mut grad);
    }
    Ok(grad)
}

/// Exact gradient of `Agg(f_t(z_t))` where each masked token contributes its
/// own logit-space gradient `dlogits[t] = df_t/dz` (already including any
/// detached per-token weight).
pub fn backward_logit_terms(
    params: &PolicyParams,
    traj: &Trajectory,
    branch: Branch,
    dlogits: &[RealVec],
) -> Result<Gradient, PolicyError> {
    if dlogits.len() != traj.len() {
        return Err(PolicyError::ShapeMismatch { expected: traj.len(), got: dlogits.len() });
    }
    let m = traj.masked_count();
    if m == 0 {
        return Err(PolicyError::Num(NumError::EmptyInput));
    }
    let feats = branch_features(params.v, traj, branch)?;
    let mut grad = params.zeros_grad();
    for t in 0..traj.len() {
        if !traj.mask[t] {
            continue;
        }
        let (_, act) = params.forward_with_hidden(&feats[t])?;
        let dz: Vec<(usize, f64)> = dlogits[t]
            .iter()
            .enumerate()
            .filter(|(_, &d)| d != 0.0)
            .map(|(v, &d)| (v, d / m as f64))
            .collect();
        accumulate(params, &feats[t], &act, &dz, &mut grad);
    }
    Ok(grad)
}

/// L2 norm of the single-token gradient `d log pi(y_t | s_t) / d theta`,
/// computed in closed form without materializing the full gradient.
pub fn per_token_grad_norm(
    params: &PolicyParams,
    traj: &Trajectory,
    branch: Branch,
    t: usize,
) -> Result<f64, PolicyError> {
    let feats = branch_features(params.v, traj, branch)?;
    let (logits, act) = params.forward_with_hidden(&feats[t])?;
    let probs = masked_probs(&logits, traj.allowed[t])?;
    let y = traj.tokens[t] as usize;
    let h = params.h;
    let mut dz_sq = 0.0;
    let mut dhidden = vec![0.0; h];
    for v in 0..params.v {
        if traj.allowed[t] >> v & 1 == 1 {
            let indicator = if v == y { 1.0 } else { 0.0 };
            let d = indicator - probs[v];
            dz_sq += d * d;
            let row = &params.block.w2[v * h..(v + 1) * h];
            for i in 0..h {
                dhidden[i] += d * row[i];
            }
        }
    }
    let act_sq: f64 = act.iter().map(|a| a * a).sum();
    let dpre_sq: f64 = dhidden
        .iter()
        .zip(&act)
        .map(|(dh, a)| {
            let dp = dh * (1.0 - a * a);
            dp * dp
        })
        .sum();
    let feat_sq: f64 = feats[t].iter().map(|x| x * x).sum();
    // Blocks: w2 (dz outer act), b2 (dz), w1t (feat outer dpre), b1 (dpre).
    Ok((dz_sq * act_sq + dz_sq + dpre_sq * feat_sq + dpre_sq).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Catalog, EnvKind};
    use crate::numkit::{central_diff_directional, RngStream};
    use crate::policy::rollout::{logprobs_from_features, rollout};
    use crate::policy::ParamBlock;

    fn random_direction(params: &PolicyParams, rng: &mut RngStream) -> ParamBlock {
        let mut d = params.zeros_grad();
        for x in d.flat_mut() {
            *x = rng.normal();
        }
        let norm = d.l2_norm();
        d.scale(1.0 / norm);
        d
    }

    fn agg_weighted(params: &PolicyParams, traj: &Trajectory, w: &[f64]) -> f64 {
        let feats = branch_features(params.v, traj, Branch::Student).unwrap();
        let lps = logprobs_from_features(params, traj, &feats).unwrap();
        let m = traj.masked_count() as f64;
        lps.iter()
            .zip(w)
            .zip(&traj.mask)
            .filter(|(_, &mk)| mk)
            .map(|((lp, wt), _)| lp * wt)
            .sum::<f64>()
            / m
    }

    fn setup(seed: u64) -> (PolicyParams, Trajectory, Vec<f64>) {
        let cat = Catalog::builtin(EnvKind::TreasureRooms);
        let params = PolicyParams::init(64, 24, seed);
        let mut rng = RngStream::new(seed, 1);
        let traj = rollout(&params, &cat, "put_ball_shelf", None, &mut rng, false).unwrap();
        let weights: Vec<f64> = (0..traj.len()).map(|_| rng.uniform(-2.0, 2.0)).collect();
        (params, traj, weights)
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let (params, traj, _) = setup(1);
        let grad =
            backward_weighted_logprob(&params, &traj, Branch::Student, &vec![0.0; traj.len()])
                .unwrap();
        assert_eq!(grad.l2_norm(), 0.0);
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let (params, traj, weights) = setup(2);
        let g1 = backward_weighted_logprob(&params, &traj, Branch::Student, &weights).unwrap();
        let scaled: Vec<f64> = weights.iter().map(|w| 2.5 * w).collect();
        let g2 = backward_weighted_logprob(&params, &traj, Branch::Student, &scaled).unwrap();
        let mut expect = g1.clone();
        expect.scale(2.5);
        for (a, b) in g2.flat().zip(expect.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn directional_derivatives_match_central_differences() {
        let (params, traj, weights) = setup(3);
        let grad = backward_weighted_logprob(&params, &traj, Branch::Student, &weights).unwrap();
        let mut rng = RngStream::new(99, 0);
        for _ in 0..50 {
            let dir = random_direction(&params, &mut rng);
            let analytic = grad.dot(&dir);
            let fd = central_diff_directional(
                |c| {
                    let mut p = params.clone();
                    p.block.add_scaled(&dir, c[0]);
                    agg_weighted(&p, &traj, &weights)
                },
                &[0.0],
                &[1.0],
                1e-5,
            )
            .unwrap();
            let scale = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / scale <= 1e-6,
                "fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn per_token_norm_matches_assembled_gradient() {
        let (params, traj, _) = setup(4);
        for t in [0, traj.len() / 2, traj.len() - 1] {
            let mut w = vec![0.0; traj.len()];
            w[t] = traj.masked_count() as f64; // undo the Agg division
            let grad = backward_weighted_logprob(&params, &traj, Branch::Student, &w).unwrap();
            let fast = per_token_grad_norm(&params, &traj, Branch::Student, t).unwrap();
            assert!((grad.l2_norm() - fast).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_terms_agree_with_weighted_path() {
        // f_t(z) = w_t * masked_log_softmax(z)[y_t] expressed via dlogits.
        let (params, traj, weights) = setup(5);
        let g_w = backward_weighted_logprob(&params, &traj, Branch::Student, &weights).unwrap();
        let feats = branch_features(params.v, &traj, Branch::Student).unwrap();
        let mut dlogits = Vec::new();
        for t in 0..traj.len() {
            let logits = params.forward(&feats[t]).unwrap();
            let probs = masked_probs(&logits, traj.allowed[t]).unwrap();
            let y = traj.tokens[t] as usize;
            let mut dz = vec![0.0; params.v];
            for v in 0..params.v {
                if traj.allowed[t] >> v & 1 == 1 {
                    let ind = if v == y { 1.0 } else { 0.0 };
                    dz[v] = weights[t] * (ind - probs[v]);
                }
            }
            dlogits.push(dz);
        }
        let g_z = backward_logit_terms(&params, &traj, Branch::Student, &dlogits).unwrap();
        for (a, b) in g_w.flat().zip(g_z.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

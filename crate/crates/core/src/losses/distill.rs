//! Distillation objectives: the gated sampled-token loss, the reference-KL
//! estimators, importance-weighted K3 distillation, and full-distribution
//! divergences with exact logit-space gradients.

use super::{gate::gate_value, GateSpec, LossError, TokenSignals};
use crate::numkit::{masked_mean, RealVec, PROB_UNDERFLOW};
use crate::policy::Trajectory;

fn teacher_of(traj: &Trajectory) -> Result<&[f64], LossError> {
    traj.teacher_lp.as_deref().ok_or(LossError::MissingTeacher)
}

/// Per-token distillation signals: detached gap, entropy, gate, loss term.
/// Arrays are full-length; entries at unmasked positions are zero.
pub fn sdar_signals(traj: &Trajectory, spec: &GateSpec, ln_v: f64) -> Result<TokenSignals, LossError> {
    let teacher = teacher_of(traj)?;
    if traj.masked_count() == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut signals = TokenSignals {
        delta: vec![0.0; traj.len()],
        entropy: vec![0.0; traj.len()],
        gate: vec![0.0; traj.len()],
        loss_term: vec![0.0; traj.len()],
    };
    for t in 0..traj.len() {
        if !traj.mask[t] {
            continue;
        }
        let delta = teacher[t] - traj.student_lp[t];
        let h = traj.student_h[t];
        let g = gate_value(spec, delta, h, ln_v);
        signals.delta[t] = delta;
        signals.entropy[t] = h;
        signals.gate[t] = g;
        signals.loss_term[t] = g * delta;
    }
    Ok(signals)
}

/// Gated distillation loss `Agg(g_t * (teacher_lp - student_lp))`. Backward
/// weights are `-g_t` on the student log-probs only; the teacher term and
/// the gate are detached.
pub fn sdar_loss(
    traj: &Trajectory,
    spec: &GateSpec,
    ln_v: f64,
) -> Result<(f64, Vec<f64>, TokenSignals), LossError> {
    let signals = sdar_signals(traj, spec, ln_v)?;
    let loss = masked_mean(&signals.loss_term, &traj.mask).map_err(|_| LossError::EmptyMask)?;
    let weights: Vec<f64> = signals
        .gate
        .iter()
        .zip(&traj.mask)
        .map(|(&g, &m)| if m { -g } else { 0.0 })
        .collect();
    Ok((loss, weights, signals))
}

/// Loss value with an externally fixed gate vector (the gate is detached, so
/// perturbed re-evaluations must hold it at its base value).
pub fn sdar_value_frozen(traj: &Trajectory, gates: &[f64]) -> Result<f64, LossError> {
    let teacher = teacher_of(traj)?;
    let terms: Vec<f64> = (0..traj.len())
        .map(|t| gates[t] * (teacher[t] - traj.student_lp[t]))
        .collect();
    masked_mean(&terms, &traj.mask).map_err(|_| LossError::EmptyMask)
}

/// Value of the non-detached gap-gate surrogate `Agg(sigma(beta*Delta)*Delta)`
/// with gradient notionally flowing through both factors. Diagnostic only.
pub fn sdar_nondetached_value(traj: &Trajectory, beta: f64) -> Result<f64, LossError> {
    let teacher = teacher_of(traj)?;
    let terms: Vec<f64> = (0..traj.len())
        .map(|t| {
            let d = teacher[t] - traj.student_lp[t];
            crate::numkit::sigmoid(beta * d) * d
        })
        .collect();
    masked_mean(&terms, &traj.mask).map_err(|_| LossError::EmptyMask)
}

/// Backward weights of the non-detached surrogate:
/// `-(g + beta*Delta*g*(1-g))` per token, the closed form of the product
/// rule through gate and gap.
pub fn sdar_nondetached_weights(traj: &Trajectory, beta: f64) -> Result<Vec<f64>, LossError> {
    let teacher = teacher_of(traj)?;
    if traj.masked_count() == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok((0..traj.len())
        .map(|t| {
            if !traj.mask[t] {
                return 0.0;
            }
            let d = teacher[t] - traj.student_lp[t];
            let g = crate::numkit::sigmoid(beta * d);
            -(g + beta * d * g * (1.0 - g))
        })
        .collect())
}

/// Token-level KL penalty toward the reference policy.
/// `raw_diff`: `Agg(d_t)` with unit weights; `k3`: `Agg(e^-d - 1 + d)` with
/// weights `1 - e^-d`, where `d_t = student_lp - ref_lp`.
pub fn kl_ref(
    traj: &Trajectory,
    estimator: super::KlEstimator,
) -> Result<(f64, Vec<f64>), LossError> {
    let reference = traj.ref_lp.as_deref().ok_or(LossError::MissingRefLogprobs)?;
    if traj.masked_count() == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut values = vec![0.0; traj.len()];
    let mut weights = vec![0.0; traj.len()];
    for t in 0..traj.len() {
        if !traj.mask[t] {
            continue;
        }
        let d = traj.student_lp[t] - reference[t];
        match estimator {
            super::KlEstimator::RawDiff => {
                values[t] = d;
                weights[t] = 1.0;
            }
            super::KlEstimator::K3 => {
                values[t] = (-d).exp() - 1.0 + d;
                weights[t] = 1.0 - (-d).exp();
            }
        }
    }
    let value = masked_mean(&values, &traj.mask).map_err(|_| LossError::EmptyMask)?;
    Ok((value, weights))
}

/// Importance-weighted K3 distillation: `Agg(rho_t * k3(d_t))` with
/// `d_t = student_lp - teacher_lp` and `rho_t = exp(student_lp - old_lp)`.
/// Both factors differentiate through the student log-prob; the backward
/// weight combines the product-rule terms:
/// `rho * (k3(d) + 1 - e^-d)`.
pub fn skill_sd_loss(traj: &Trajectory) -> Result<(f64, Vec<f64>), LossError> {
    let teacher = teacher_of(traj)?;
    let old = traj.old_lp.as_deref().ok_or(LossError::MissingOldLogprobs)?;
    if traj.masked_count() == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut values = vec![0.0; traj.len()];
    let mut weights = vec![0.0; traj.len()];
    for t in 0..traj.len() {
        if !traj.mask[t] {
            continue;
        }
        let d = traj.student_lp[t] - teacher[t];
        let k = (-d).exp() - 1.0 + d;
        let rho = (traj.student_lp[t] - old[t]).exp();
        values[t] = rho * k;
        weights[t] = rho * (k + 1.0 - (-d).exp());
    }
    let value = masked_mean(&values, &traj.mask).map_err(|_| LossError::EmptyMask)?;
    Ok((value, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceKind {
    ReverseKl,
    ForwardKl,
    Jsd,
}

/// Full-vocabulary divergence between the student and (detached) teacher
/// distributions, plus its exact gradient with respect to the student
/// logits. Logit entries may be -inf (masked support) as long as both
/// vectors share support.
pub fn full_dist_divergence(
    student_logits: &[f64],
    teacher_logits: &[f64],
    kind: DivergenceKind,
) -> Result<(f64, RealVec), LossError> {
    if student_logits.len() != teacher_logits.len() {
        return Err(LossError::ShapeMismatch {
            expected: student_logits.len(),
            got: teacher_logits.len(),
        });
    }
    let lp_s = crate::numkit::log_softmax(student_logits)
        .map_err(|_| LossError::ShapeMismatch { expected: 1, got: 0 })?;
    let lp_t = crate::numkit::log_softmax(teacher_logits)
        .map_err(|_| LossError::ShapeMismatch { expected: 1, got: 0 })?;
    let n = lp_s.len();
    let p: Vec<f64> = lp_s.iter().map(|lp| lp.exp()).collect();
    let q: Vec<f64> = lp_t.iter().map(|lp| lp.exp()).collect();
    let mut grad = vec![0.0; n];
    let value = match kind {
        DivergenceKind::ReverseKl => {
            let mut val = 0.0;
            for v in 0..n {
                if p[v] >= PROB_UNDERFLOW {
                    val += p[v] * (lp_s[v] - lp_t[v]);
                }
            }
            for v in 0..n {
                if p[v] >= PROB_UNDERFLOW {
                    grad[v] = p[v] * ((lp_s[v] - lp_t[v]) - val);
                }
            }
            val
        }
        DivergenceKind::ForwardKl => {
            let mut val = 0.0;
            for v in 0..n {
                if q[v] >= PROB_UNDERFLOW {
                    val += q[v] * (lp_t[v] - lp_s[v]);
                }
            }
            for v in 0..n {
                grad[v] = p[v] - q[v];
            }
            val
        }
        DivergenceKind::Jsd => {
            // M = (p+q)/2; value = KL(p||M)/2 + KL(q||M)/2.
            let ln_m: Vec<f64> = (0..n).map(|v| (0.5 * (p[v] + q[v])).ln()).collect();
            let mut kl_pm = 0.0;
            let mut kl_qm = 0.0;
            for v in 0..n {
                if p[v] >= PROB_UNDERFLOW {
                    kl_pm += p[v] * (lp_s[v] - ln_m[v]);
                }
                if q[v] >= PROB_UNDERFLOW {
                    kl_qm += q[v] * (lp_t[v] - ln_m[v]);
                }
            }
            for v in 0..n {
                if p[v] >= PROB_UNDERFLOW {
                    grad[v] = 0.5 * p[v] * ((lp_s[v] - ln_m[v]) - kl_pm);
                }
            }
            0.5 * (kl_pm + kl_qm)
        }
    };
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{central_diff_directional, RngStream};

    // ---- scalar oracles (frozen from a 40-digit evaluation) ----

    #[test]
    fn k3_estimator_values() {
        assert!(((1.0f64).exp().recip() - 0.36787944117144233).abs() < 1e-16);
        let k3 = |d: f64| (-d).exp() - 1.0 + d;
        assert!((k3(1.0) - 0.36787944117144233).abs() < 1e-15);
        assert!((k3(-1.0) - 0.7182818284590452).abs() < 1e-15);
        assert_eq!(k3(0.0), 0.0);
        for d in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            assert!(k3(d) >= 0.0);
        }
    }

    fn synthetic_traj(teacher: Vec<f64>, student: Vec<f64>, mask: Vec<bool>) -> Trajectory {
        let n = student.len();
        Trajectory {
            task_id: "synthetic".into(),
            task_type: "synthetic".into(),
            task_desc: vec![],
            horizon: 8,
            turn_obs: vec![vec![]],
            tokens: vec![3; n],
            mask,
            turn_of: vec![0; n],
            pos_of: (0..n).collect(),
            allowed: vec![u64::MAX; n],
            student_lp: student,
            student_h: vec![0.5; n],
            old_lp: None,
            teacher_lp: Some(teacher),
            ref_lp: None,
            student_logits: None,
            teacher_logits: None,
            reward: 0.0,
            student_skill: None,
            teacher_skill: None,
            skill_id: None,
        }
    }

    #[test]
    fn sdar_single_token_oracle() {
        // gap gate beta=5, delta=0.5: g = sigma(2.5) = 0.9241418199787566,
        // loss = 0.4620709099893783.
        let traj = synthetic_traj(vec![-1.0], vec![-1.5], vec![true]);
        let (loss, weights, signals) = sdar_loss(&traj, &GateSpec::gap(5.0), 1.0).unwrap();
        assert!((signals.gate[0] - 0.9241418199787566).abs() < 1e-12);
        assert!((loss - 0.4620709099893783).abs() < 1e-12);
        assert!((weights[0] + 0.9241418199787566).abs() < 1e-12);
    }

    #[test]
    fn sdar_zero_gap_is_zero_loss() {
        let traj = synthetic_traj(vec![-1.0, -2.0], vec![-1.0, -2.0], vec![true, true]);
        let (loss, _, _) = sdar_loss(&traj, &GateSpec::gap(5.0), 1.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn sdar_ungated_cancellation() {
        let traj = synthetic_traj(vec![0.0, -1.0], vec![-0.5, -0.5], vec![true, true]);
        let (loss, _, _) = sdar_loss(&traj, &GateSpec::none(), 1.0).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn sdar_empty_mask_errors() {
        let traj = synthetic_traj(vec![-1.0], vec![-1.5], vec![false]);
        assert_eq!(
            sdar_loss(&traj, &GateSpec::gap(5.0), 1.0).unwrap_err(),
            LossError::EmptyMask
        );
    }

    #[test]
    fn sdar_missing_teacher_errors() {
        let mut traj = synthetic_traj(vec![-1.0], vec![-1.5], vec![true]);
        traj.teacher_lp = None;
        assert_eq!(
            sdar_loss(&traj, &GateSpec::gap(5.0), 1.0).unwrap_err(),
            LossError::MissingTeacher
        );
    }

    #[test]
    fn kl_ref_estimators() {
        let mut traj = synthetic_traj(vec![0.0; 2], vec![-1.0, -2.0], vec![true, true]);
        traj.ref_lp = Some(vec![-1.0, -2.0]);
        for est in [super::super::KlEstimator::RawDiff, super::super::KlEstimator::K3] {
            let (v, _) = kl_ref(&traj, est).unwrap();
            assert_eq!(v, 0.0);
        }
        // d = 1 and d = -1 under k3.
        traj.ref_lp = Some(vec![-2.0, -1.0]);
        let (v, w) = kl_ref(&traj, super::super::KlEstimator::K3).unwrap();
        let expect = 0.5 * (0.36787944117144233 + 0.7182818284590452);
        assert!((v - expect).abs() < 1e-12);
        assert!((w[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);

        traj.ref_lp = None;
        assert_eq!(
            kl_ref(&traj, super::super::KlEstimator::K3).unwrap_err(),
            LossError::MissingRefLogprobs
        );
    }

    #[test]
    fn skill_sd_values() {
        // d = 0, rho = 1 -> 0.
        let mut traj = synthetic_traj(vec![-1.0], vec![-1.0], vec![true]);
        traj.old_lp = Some(vec![-1.0]);
        let (v, _) = skill_sd_loss(&traj).unwrap();
        assert_eq!(v, 0.0);

        // d = 1, rho = 1 -> k3(1).
        let mut traj = synthetic_traj(vec![-2.0], vec![-1.0], vec![true]);
        traj.old_lp = Some(vec![-1.0]);
        let (v, _) = skill_sd_loss(&traj).unwrap();
        assert!((v - 0.36787944117144233).abs() < 1e-12);

        traj.old_lp = None;
        assert_eq!(skill_sd_loss(&traj).unwrap_err(), LossError::MissingOldLogprobs);
    }

    #[test]
    fn divergences_vanish_for_identical_distributions() {
        let logits = vec![0.3, -1.0, 2.0, 0.0];
        for kind in [DivergenceKind::ReverseKl, DivergenceKind::ForwardKl, DivergenceKind::Jsd] {
            let (v, g) = full_dist_divergence(&logits, &logits, kind).unwrap();
            assert!(v.abs() < 1e-14, "{kind:?}: {v}");
            for x in g {
                assert!(x.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jsd_point_mass_vs_uniform_oracle() {
        // Student concentrated on token 0 (logit limit), teacher uniform:
        // frozen oracle 0.2157615543388357.
        let (v, _) =
            full_dist_divergence(&[40.0, -40.0], &[0.0, 0.0], DivergenceKind::Jsd).unwrap();
        assert!((v - 0.2157615543388357).abs() < 1e-9, "{v}");
    }

    #[test]
    fn jsd_bounded_by_ln2() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..100 {
            let a: Vec<f64> = (0..6).map(|_| rng.uniform(-8.0, 8.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.uniform(-8.0, 8.0)).collect();
            let (v, _) = full_dist_divergence(&a, &b, DivergenceKind::Jsd).unwrap();
            assert!(v >= -1e-15 && v <= std::f64::consts::LN_2 + 1e-12, "{v}");
        }
    }

    #[test]
    fn divergence_gradients_match_central_differences() {
        let mut rng = RngStream::new(11, 2);
        for kind in [DivergenceKind::ReverseKl, DivergenceKind::ForwardKl, DivergenceKind::Jsd] {
            for _ in 0..20 {
                let zs: Vec<f64> = (0..8).map(|_| rng.uniform(-3.0, 3.0)).collect();
                let zt: Vec<f64> = (0..8).map(|_| rng.uniform(-3.0, 3.0)).collect();
                let (_, grad) = full_dist_divergence(&zs, &zt, kind).unwrap();
                for _ in 0..8 {
                    let dir: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
                    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dir: Vec<f64> = dir.iter().map(|x| x / norm).collect();
                    let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
                    let fd = central_diff_directional(
                        |c| {
                            let z: Vec<f64> =
                                zs.iter().zip(&dir).map(|(z, d)| z + c[0] * d).collect();
                            full_dist_divergence(&z, &zt, kind).unwrap().0
                        },
                        &[0.0],
                        &[1.0],
                        1e-6,
                    )
                    .unwrap();
                    let scale = fd.abs().max(analytic.abs()).max(1e-8);
                    assert!(
                        (fd - analytic).abs() / scale <= 1e-6,
                        "{kind:?} fd={fd} an={analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn nondetached_weights_closed_form() {
        let traj = synthetic_traj(vec![-0.5], vec![-1.5], vec![true]);
        let beta = 5.0;
        let w = sdar_nondetached_weights(&traj, beta).unwrap();
        let d: f64 = 1.0;
        let g = crate::numkit::sigmoid(beta * d);
        // coupling factor at beta=5, delta=1: 0.033240283353950786
        let coupling = beta * d * g * (1.0 - g);
        assert!((coupling - 0.033240283353950786).abs() < 1e-14);
        assert!((w[0] + (g + coupling)).abs() < 1e-14);
    }
}

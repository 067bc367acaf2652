//! Per-step metric records (JSONL + CSV) and batch gap profiles.

use super::RolloutGroup;
use crate::losses::{GapHistogram, LossError};
use serde::{Deserialize, Serialize};

/// One training-step record; field order matches the JSONL schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub reward_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    pub loss_total: f64,
    pub loss_grpo: f64,
    pub loss_kl_ref: f64,
    pub loss_distill: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_active_ratio: Option<f64>,
    pub grad_norm: f64,
    pub ms: f64,
}

pub const CSV_HEADER: &str = "step,reward_mean,success_rate,loss_total,loss_grpo,loss_kl_ref,loss_distill,gap_mean,gate_mean,gate_active_ratio,grad_norm,ms";

fn csv_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.reward_mean,
            csv_opt(self.success_rate),
            self.loss_total,
            self.loss_grpo,
            self.loss_kl_ref,
            self.loss_distill,
            csv_opt(self.gap_mean),
            csv_opt(self.gate_mean),
            csv_opt(self.gate_active_ratio),
            self.grad_norm,
            self.ms
        )
    }
}

/// Teacher-student gap partitions of one batch: by turn index, by
/// within-turn relative position quartile, and the 41-bin histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapProfiles {
    pub step: usize,
    pub per_turn: Vec<Option<f64>>,
    pub per_position_quartile: [Option<f64>; 4],
    pub histogram: GapHistogram,
}

/// Partition the batch's detached gaps. Buckets with no tokens stay None.
pub fn gap_profiles(batch: &[RolloutGroup], step: usize) -> Result<GapProfiles, LossError> {
    let mut turn_acc: Vec<(f64, usize)> = Vec::new();
    let mut quart_acc = [(0.0f64, 0usize); 4];
    let mut histogram = GapHistogram::new();
    for group in batch {
        for traj in &group.trajectories {
            let teacher = traj.teacher_lp.as_ref().ok_or(LossError::MissingTeacher)?;
            // Tokens per turn, to place each token's relative position.
            let mut turn_len: Vec<usize> = Vec::new();
            for t in 0..traj.len() {
                let turn = traj.turn_of[t];
                if turn_len.len() <= turn {
                    turn_len.resize(turn + 1, 0);
                }
                turn_len[turn] += 1;
            }
            for t in 0..traj.len() {
                if !traj.mask[t] {
                    continue;
                }
                let delta = teacher[t] - traj.student_lp[t];
                histogram.add(delta);
                let turn = traj.turn_of[t];
                if turn_acc.len() <= turn {
                    turn_acc.resize(turn + 1, (0.0, 0));
                }
                turn_acc[turn].0 += delta;
                turn_acc[turn].1 += 1;
                let len = turn_len[turn];
                let rel = if len > 1 {
                    traj.pos_of[t] as f64 / (len - 1) as f64
                } else {
                    0.0
                };
                let q = ((rel * 4.0) as usize).min(3);
                quart_acc[q].0 += delta;
                quart_acc[q].1 += 1;
            }
        }
    }
    let per_turn = turn_acc
        .iter()
        .map(|&(s, n)| if n > 0 { Some(s / n as f64) } else { None })
        .collect();
    let per_position_quartile =
        quart_acc.map(|(s, n)| if n > 0 { Some(s / n as f64) } else { None });
    Ok(GapProfiles { step, per_turn, per_position_quartile, histogram })
}

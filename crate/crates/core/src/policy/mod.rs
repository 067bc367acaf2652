//! The differentiable token policy: bag-of-token featurization of
//! (task, observation, optional privileged skill, partial response), a
//! one-hidden-layer tanh network to logits, masked sampling over admissible
//! action prefixes, branch rescoring, and exact analytic gradients of
//! weighted log-likelihood sums.

mod backward;
mod features;
mod rollout;
mod script;
mod serialize;

pub use backward::{backward_logit_terms, backward_weighted_logprob, per_token_grad_norm};
pub use features::{featurize, FeatureCtx};
pub use rollout::{
    allowed_next, branch_features, logprobs_from_features, rescore, rescore_logits, rollout,
    Branch, RescoreMode, Trajectory,
};
pub use script::scripted_params;
pub use serialize::{load_params, save_params};

use crate::env::{EnvError, TokenId};
use crate::numkit::{self, NumError, RealVec, RngStream};
use thiserror::Error;

/// Feature layout: five V-wide bags/one-hots plus turn, position, bias slots.
pub fn feature_dim(v: usize) -> usize {
    5 * v + 3
}

/// Bag counts are clipped here, bounding every feature in [0, 3].
pub const BAG_CLIP: f64 = 3.0;

/// Dedicated stream id for parameter initialization draws.
pub const INIT_STREAM: u64 = 0x1517;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token {0} out of vocabulary range")]
    TokenOutOfRange(TokenId),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("teacher rescore requires a skill")]
    MissingSkill,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// The four parameter blocks. `w1t` is the input layer stored transposed
/// (one contiguous H-row per feature) so sparse feature vectors touch only
/// their own rows; `w2` is V x H row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub w1t: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(v: usize, h: usize, f: usize) -> Self {
        Self {
            w1t: vec![0.0; f * h],
            b1: vec![0.0; h],
            w2: vec![0.0; v * h],
            b2: vec![0.0; v],
        }
    }

    pub fn len(&self) -> usize {
        self.w1t.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> impl Iterator<Item = &f64> {
        self.w1t.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1t
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        for (a, b) in self.flat_mut().zip(other.flat()) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.flat_mut() {
            *a *= c;
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.flat().zip(other.flat()).map(|(a, b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.flat().all(|x| x.is_finite())
    }
}

/// Gradients share the parameter layout.
pub type Gradient = ParamBlock;

/// Mutable parameter set of the token policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub v: usize,
    pub h: usize,
    pub f: usize,
    pub block: ParamBlock,
    pub seed: u64,
    pub step: u64,
}

impl PolicyParams {
    pub fn zeros(v: usize, h: usize) -> Self {
        let f = feature_dim(v);
        Self { v, h, f, block: ParamBlock::zeros(v, h, f), seed: 0, step: 0 }
    }

    /// Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out)) per
    /// matrix; biases zero. Deterministic in `seed`.
    pub fn init(v: usize, h: usize, seed: u64) -> Self {
        let f = feature_dim(v);
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let mut block = ParamBlock::zeros(v, h, f);
        let a1 = (6.0 / (f + h) as f64).sqrt();
        for w in block.w1t.iter_mut() {
            *w = rng.uniform(-a1, a1);
        }
        let a2 = (6.0 / (h + v) as f64).sqrt();
        for w in block.w2.iter_mut() {
            *w = rng.uniform(-a2, a2);
        }
        Self { v, h, f, block, seed, step: 0 }
    }

    pub fn zeros_grad(&self) -> Gradient {
        ParamBlock::zeros(self.v, self.h, self.f)
    }

    /// Logits for one feature vector: `W2 tanh(W1 phi + b1) + b2`.
    pub fn forward(&self, feat: &[f64]) -> Result<RealVec, PolicyError> {
        Ok(self.forward_with_hidden(feat)?.0)
    }

    /// Forward pass returning (logits, hidden activations) for backward use.
    pub fn forward_with_hidden(&self, feat: &[f64]) -> Result<(RealVec, RealVec), PolicyError> {
        if feat.len() != self.f {
            return Err(PolicyError::ShapeMismatch { expected: self.f, got: feat.len() });
        }
        let h = self.h;
        let mut pre = self.block.b1.clone();
        for (j, &x) in feat.iter().enumerate() {
            if x != 0.0 {
                let row = &self.block.w1t[j * h..(j + 1) * h];
                for (p, &w) in pre.iter_mut().zip(row) {
                    *p += x * w;
                }
            }
        }
        let act: RealVec = pre.iter().map(|&p| p.tanh()).collect();
        let mut logits = self.block.b2.clone();
        for (vi, z) in logits.iter_mut().enumerate() {
            let row = &self.block.w2[vi * h..(vi + 1) * h];
            *z += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
        }
        Ok((logits, act))
    }

    /// Log-probability of `token` and the distribution entropy at these
    /// features, over the full (unmasked) vocabulary.
    pub fn token_logprob_and_entropy(
        &self,
        feat: &[f64],
        token: TokenId,
    ) -> Result<(f64, f64), PolicyError> {
        if (token as usize) >= self.v {
            return Err(PolicyError::TokenOutOfRange(token));
        }
        let logits = self.forward(feat)?;
        let lps = numkit::log_softmax(&logits)?;
        let h = numkit::entropy_from_logprobs(&lps);
        Ok((lps[token as usize], h))
    }
}

/// Frozen copy of policy parameters serving as theta_old or pi_ref.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotRole {
    Old,
    Reference,
}

#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    role: SnapshotRole,
    params: PolicyParams,
}

impl PolicySnapshot {
    pub fn of(params: &PolicyParams, role: SnapshotRole) -> Self {
        Self { role, params: params.clone() }
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

/// Log-softmax restricted to the `allowed` bitmask support; disallowed
/// entries come back as -inf.
pub fn masked_log_softmax(logits: &[f64], allowed: u64) -> Result<RealVec, NumError> {
    debug_assert!(allowed != 0, "empty admissible support");
    let masked: RealVec = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if allowed >> i & 1 == 1 { z } else { f64::NEG_INFINITY })
        .collect();
    numkit::log_softmax(&masked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_uniform_distribution() {
        let p = PolicyParams::zeros(64, 64);
        let feat = vec![0.0; p.f];
        let (lp, h) = p.token_logprob_and_entropy(&feat, 5).unwrap();
        assert!((lp + 64.0f64.ln()).abs() < 1e-12);
        assert!((h - 64.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let p = PolicyParams::init(64, 64, 3);
        let mut feat = vec![0.0; p.f];
        feat[10] = 1.0;
        feat[p.f - 1] = 1.0;
        let l1 = p.forward(&feat).unwrap();
        let l2 = p.forward(&feat).unwrap();
        assert_eq!(l1, l2);
        let lps = numkit::log_softmax(&l1).unwrap();
        let sum: f64 = lps.iter().map(|lp| lp.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_locally_lipschitz_in_weights() {
        let mut p = PolicyParams::init(64, 64, 5);
        let mut feat = vec![0.0; p.f];
        feat[0] = 3.0;
        feat[p.f - 1] = 1.0;
        let base = p.forward(&feat).unwrap();
        p.block.w2[17] += 1e-9;
        let bumped = p.forward(&feat).unwrap();
        for (a, b) in base.iter().zip(&bumped) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn dominant_bias_concentrates_mass() {
        let mut p = PolicyParams::zeros(64, 64);
        p.block.b2[9] = 10.0;
        let feat = vec![0.0; p.f];
        let (lp, _) = p.token_logprob_and_entropy(&feat, 9).unwrap();
        assert!(lp >= -1e-4, "{lp}");
    }

    #[test]
    fn token_out_of_range_rejected() {
        let p = PolicyParams::zeros(8, 4);
        let feat = vec![0.0; p.f];
        assert!(matches!(
            p.token_logprob_and_entropy(&feat, 8),
            Err(PolicyError::TokenOutOfRange(8))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = PolicyParams::zeros(8, 4);
        assert!(matches!(
            p.forward(&[0.0; 3]),
            Err(PolicyError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn masked_log_softmax_restricts_support() {
        let logits = vec![0.0; 4];
        let lps = masked_log_softmax(&logits, 0b0101).unwrap();
        assert!((lps[0] + std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(lps[1], f64::NEG_INFINITY);
        assert!((lps[2] + std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(lps[3], f64::NEG_INFINITY);
    }

    #[test]
    fn init_is_seed_deterministic_and_in_range() {
        let a = PolicyParams::init(64, 64, 11);
        let b = PolicyParams::init(64, 64, 11);
        assert_eq!(a, b);
        let bound = (6.0 / (a.f + a.h) as f64).sqrt();
        assert!(a.block.w1t.iter().all(|w| w.abs() <= bound));
        assert!(a.block.b1.iter().all(|&b| b == 0.0));
    }
}

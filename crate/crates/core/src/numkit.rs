//! Numerically stable scalar/vector primitives, deterministic RNG streams,
//! and the central-difference harness used by every gradient check.
//!
//! All training-path arithmetic is f64; there is no reduced-precision mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Ordered sequence of f64 values. Entries are finite unless a caller
/// explicitly documents otherwise (masked logits use `f64::NEG_INFINITY`).
pub type RealVec = Vec<f64>;

/// Probabilities below this threshold contribute zero to entropy sums,
/// avoiding `0 * -inf` NaNs.
pub const PROB_UNDERFLOW: f64 = 1e-300;

/// Floor applied when taking logs of externally supplied probabilities.
/// Never applied inside `log_softmax`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Overflow-safe logistic sigmoid, strictly in (0, 1) for finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-probabilities via max-shifted log-sum-exp.
///
/// Entries may be `NEG_INFINITY` (excluded support) as long as at least one
/// entry is finite; the corresponding outputs stay `NEG_INFINITY`.
pub fn log_softmax(logits: &[f64]) -> Result<RealVec, NumError> {
    if logits.is_empty() {
        return Err(NumError::EmptyInput);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(NumError::NonFinite("log_softmax"));
    }
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// Shannon entropy of `softmax(logits)` in nats; in [0, ln V].
pub fn entropy_from_logits(logits: &[f64]) -> Result<f64, NumError> {
    let lps = log_softmax(logits)?;
    Ok(entropy_from_logprobs(&lps))
}

/// Entropy from already-normalized log-probabilities.
pub fn entropy_from_logprobs(lps: &[f64]) -> f64 {
    let mut h = 0.0;
    for &lp in lps {
        let p = lp.exp();
        if p >= PROB_UNDERFLOW {
            h -= p * lp;
        }
    }
    h.max(0.0)
}

/// Central difference of `f` at `x` along the unit direction `d`:
/// `(f(x + h*d) - f(x - h*d)) / (2h)`.
pub fn central_diff_directional<F>(f: F, x: &[f64], d: &[f64], h: f64) -> Result<f64, NumError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(x.len(), d.len(), "direction/point dimension mismatch");
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for i in 0..x.len() {
        xp[i] += h * d[i];
        xm[i] -= h * d[i];
    }
    let fp = f(&xp);
    let fm = f(&xm);
    if !fp.is_finite() || !fm.is_finite() {
        return Err(NumError::NonFinite("central_diff_directional"));
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Masked token average: sum of `z_t` over positions with `mask[t]` divided
/// by the number of such positions.
pub fn masked_mean(z: &[f64], mask: &[bool]) -> Result<f64, NumError> {
    assert_eq!(z.len(), mask.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &m) in z.iter().zip(mask) {
        if m {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(NumError::EmptyInput);
    }
    Ok(sum / count as f64)
}

/// Deterministic counter-based random stream addressed by `(seed, stream_id)`.
///
/// Same `(seed, stream_id)` yields an identical draw sequence across runs and
/// platforms; distinct stream ids are statistically independent. A stream is
/// single-owner: to fan out, derive children with fresh ids instead of
/// sharing.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream with an id mixed from this stream's id and `k`.
    pub fn derive(&self, k: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream_id ^ splitmix64(k)))
    }

    /// Uniform f64 in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "cannot draw an index from an empty range");
        self.rng.gen_range(0..n)
    }

    /// Standard normal via Box-Muller; consumes two uniform draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

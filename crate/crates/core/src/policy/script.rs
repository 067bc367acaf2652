//! Hand-built automaton parameters: one hidden unit per (last-token -> next)
//! rule, driving greedy decoding through a fixed token script. Used to
//! construct known-optimal policies in tests and demos.

use super::{feature_dim, ParamBlock, PolicyParams};
use crate::env::TokenId;

const GAIN: f64 = 20.0;
const LOGIT: f64 = 10.0;

/// Build params whose greedy argmax emits `next` whenever the last token
/// emitted this turn matches the rule key (None = nothing emitted yet).
/// Rules must not conflict; at most `h` rules.
pub fn scripted_params(v: usize, h: usize, rules: &[(Option<TokenId>, TokenId)]) -> PolicyParams {
    assert!(rules.len() <= h, "more rules than hidden units");
    let f = feature_dim(v);
    let mut block = ParamBlock::zeros(v, h, f);
    for (unit, &(last, next)) in rules.iter().enumerate() {
        assert!((next as usize) < v);
        match last {
            Some(tok) => {
                assert!((tok as usize) < v);
                // Fires when the last-token one-hot slot is set.
                block.w1t[(4 * v + tok as usize) * h + unit] = GAIN;
                block.b1[unit] -= GAIN * 0.5;
            }
            None => {
                // Fires when no one-hot slot is set: GAIN*(0.5 - sum(one-hot)).
                for slot in 0..v {
                    block.w1t[(4 * v + slot) * h + unit] = -GAIN;
                }
                block.b1[unit] += GAIN * 0.5;
            }
        }
        block.w2[(next as usize) * h + unit] = LOGIT;
    }
    PolicyParams { v, h, f, block, seed: 0, step: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::log_softmax;

    #[test]
    fn rules_fire_on_matching_last_token() {
        let rules = vec![(None, 21), (Some(21), 33), (Some(33), 1)];
        let params = scripted_params(64, 8, &rules);
        let mk = |last: Option<TokenId>| {
            let mut feat = vec![0.0; params.f];
            if let Some(t) = last {
                feat[4 * 64 + t as usize] = 1.0;
                feat[3 * 64 + t as usize] = 1.0;
            }
            feat[params.f - 1] = 1.0;
            feat
        };
        for (last, expect) in [(None, 21u32), (Some(21), 33), (Some(33), 1)] {
            let logits = params.forward(&mk(last)).unwrap();
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax as u32, expect);
            // The scripted token carries essentially all probability mass.
            let lps = log_softmax(&logits).unwrap();
            assert!(lps[expect as usize] > -1e-3);
        }
    }
}

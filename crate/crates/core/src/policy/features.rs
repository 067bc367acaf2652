//! Bag-of-token featurization of the student/teacher contexts. The skill
//! slice is the sole difference between the two branches: all-zero for the
//! student, the privileged skill bag for the teacher.

use super::{feature_dim, PolicyError, BAG_CLIP};
use crate::env::{TokenId, L_RESP};
use crate::numkit::RealVec;

/// Everything the featurizer reads at one token position.
#[derive(Debug, Clone, Copy)]
pub struct FeatureCtx<'a> {
    pub task_desc: &'a [TokenId],
    pub obs_tokens: &'a [TokenId],
    pub skill: Option<&'a [TokenId]>,
    pub emitted_this_turn: &'a [TokenId],
    pub turn_index: usize,
    pub within_pos: usize,
    pub horizon: usize,
}

fn add_bag(out: &mut [f64], offset: usize, v: usize, tokens: &[TokenId]) -> Result<(), PolicyError> {
    for &t in tokens {
        let idx = t as usize;
        if idx >= v {
            return Err(PolicyError::TokenOutOfRange(t));
        }
        let slot = &mut out[offset + idx];
        *slot = (*slot + 1.0).min(BAG_CLIP);
    }
    Ok(())
}

/// Layout: task bag | observation bag | skill bag | emitted-this-turn bag |
/// one-hot of last emitted token | turn_norm | pos_norm | bias.
pub fn featurize(v: usize, ctx: &FeatureCtx) -> Result<RealVec, PolicyError> {
    let f = feature_dim(v);
    let mut out = vec![0.0; f];
    add_bag(&mut out, 0, v, ctx.task_desc)?;
    add_bag(&mut out, v, v, ctx.obs_tokens)?;
    if let Some(skill) = ctx.skill {
        add_bag(&mut out, 2 * v, v, skill)?;
    }
    add_bag(&mut out, 3 * v, v, ctx.emitted_this_turn)?;
    if let Some(&last) = ctx.emitted_this_turn.last() {
        let idx = last as usize;
        if idx >= v {
            return Err(PolicyError::TokenOutOfRange(last));
        }
        out[4 * v + idx] = 1.0;
    }
    out[5 * v] = ctx.turn_index as f64 / ctx.horizon.max(1) as f64;
    out[5 * v + 1] = ctx.within_pos as f64 / L_RESP as f64;
    out[5 * v + 2] = 1.0;
    Ok(out)
}

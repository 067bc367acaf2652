//! Search oracles over the explicit transition graph, independent of any
//! policy: breadth-first shortest success path and exact random-walk success
//! probability. Test and verification plumbing, not a training component.

use super::{AnyEnv, Catalog, TokenId};
use crate::numkit::RngStream;
use std::collections::{HashMap, HashSet, VecDeque};

/// Pack a short state key (each element < 64, at most 10 elements) into one
/// u64 for cheap visited-set membership.
fn pack_key(key: &[u32]) -> u64 {
    assert!(key.len() <= 10, "state key too long to pack");
    let mut packed: u64 = 1; // leading 1 guards against length aliasing
    for &k in key {
        assert!(k < 64, "state key element out of packing range");
        packed = (packed << 6) | k as u64;
    }
    packed
}

/// Shortest sequence of admissible actions reaching reward 1.0, or None if
/// the task is unsolvable within its horizon. Deterministic in `seed`.
pub fn bfs_success_path(catalog: &Catalog, task_id: &str, seed: u64) -> Option<Vec<Vec<TokenId>>> {
    let mut rng = RngStream::new(seed, 0);
    let (env, _) = catalog.reset(task_id, &mut rng).ok()?;
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(pack_key(&env.state_key()));
    let mut queue: VecDeque<(AnyEnv, Vec<Vec<TokenId>>)> = VecDeque::new();
    queue.push_back((env, Vec::new()));
    while let Some((env, path)) = queue.pop_front() {
        let actions = match env.admissible() {
            Ok(a) => a,
            Err(_) => continue,
        };
        for action in actions {
            let mut next = env.clone();
            let out = next.step(&action).expect("episode active");
            let mut next_path = path.clone();
            next_path.push(action);
            if out.reward == 1.0 {
                return Some(next_path);
            }
            if out.done {
                continue;
            }
            if visited.insert(pack_key(&next.state_key())) {
                queue.push_back((next, next_path));
            }
        }
    }
    None
}

/// Exact success probability of the uniform random walk over admissible
/// actions, by enumeration with memoization on (state, turn).
pub fn random_walk_success_prob(catalog: &Catalog, task_id: &str, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let (env, _) = match catalog.reset(task_id, &mut rng) {
        Ok(v) => v,
        Err(_) => return 0.0,
    };
    let mut memo: HashMap<(u64, usize), f64> = HashMap::new();
    walk(&env, &mut memo)
}

fn walk(env: &AnyEnv, memo: &mut HashMap<(u64, usize), f64>) -> f64 {
    let key = (pack_key(&env.state_key()), env.turn_index());
    if let Some(&p) = memo.get(&key) {
        return p;
    }
    let actions = match env.admissible() {
        Ok(a) => a,
        Err(_) => return 0.0,
    };
    let mut total = 0.0;
    for action in &actions {
        let mut next = env.clone();
        let out = next.step(action).expect("episode active");
        if out.reward == 1.0 {
            total += 1.0;
        } else if !out.done {
            total += walk(&next, memo);
        }
    }
    let p = total / actions.len() as f64;
    memo.insert(key, p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Catalog, EnvKind};

    #[test]
    fn treasure_random_walk_probability_is_small() {
        let cat = Catalog::builtin(EnvKind::TreasureRooms);
        for seed in 0..5 {
            let p = random_walk_success_prob(&cat, "put_key_box", seed);
            assert!(p > 0.0, "goal reachable");
            assert!(p < 0.05, "random walk too lucky: {p}");
        }
    }

    #[test]
    fn lookup_random_walk_includes_guessing() {
        let cat = Catalog::builtin(EnvKind::LookupQa);
        let p = random_walk_success_prob(&cat, "lookup_d1_0", 0);
        // Per turn: 8/16 queries continue, 1/16 answers correctly, 7/16 answer
        // wrong and terminate. Six turns of horizon:
        //   P = sum_{t=0..5} (1/2)^t * (1/16) = 63/512.
        let expect = 63.0 / 512.0;
        assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
    }

    #[test]
    fn bfs_path_length_matches_room_distance() {
        let cat = Catalog::builtin(EnvKind::TreasureRooms);
        for entry in &cat.tasks {
            let path = bfs_success_path(&cat, &entry.task.task_id, 0).unwrap();
            // goto obj room, take, [goto container room,] put
            assert!(path.len() == 3 || path.len() == 4, "{}", entry.task.task_id);
        }
    }
}

//! LookupQA: the answer is found by following 1-3 chained key lookups in a
//! hidden per-task table. Querying a chain key returns the next chain key;
//! the final hop returns the answer value.

use super::{
    action_content, Catalog, CatalogTask, EnvError, EnvKind, Observation, SkillQuality,
    SkillText, StepOutcome, Task, TokenId, Vocab, END, SEP,
};
use crate::numkit::RngStream;

const T_QUERY: TokenId = 20;
const T_ANSWER: TokenId = 21;
const KEY0: TokenId = 22; // k0..k7 are 22..29
const VAL0: TokenId = 30; // v0..v7 are 30..37
const T_QUESTION: TokenId = 40;
const T_OK: TokenId = 41;
const T_INVALID: TokenId = 42;
const T_NOTHING: TokenId = 43;

const NUM_KEYS: u8 = 8;
const NUM_VALUES: u8 = 8;
const DEFAULT_HORIZON: usize = 6;
const TASKS_PER_DEPTH: usize = 4;

/// Deterministic chain specification for task `idx` at `depth` hops:
/// the visited key indices and the final value index.
fn chain_spec(idx: usize, depth: usize) -> (Vec<u8>, u8) {
    let start = ((idx * 3 + depth) % NUM_KEYS as usize) as u8;
    let stride = (1 + idx % 3) as u8;
    let chain: Vec<u8> = (0..depth).map(|j| (start + stride * j as u8) % NUM_KEYS).collect();
    let value = ((idx * 5 + depth * 2) % NUM_VALUES as usize) as u8;
    (chain, value)
}

/// Full lookup table for a task: `table[key_idx]` is the returned token.
fn build_table(idx: usize, depth: usize) -> ([TokenId; NUM_KEYS as usize], TokenId) {
    let (chain, value) = chain_spec(idx, depth);
    let goal = VAL0 + value as TokenId;
    let mut table = [0 as TokenId; NUM_KEYS as usize];
    for k in 0..NUM_KEYS {
        let mut decoy = ((k as usize + idx + 1) % NUM_VALUES as usize) as u8;
        if decoy == value {
            decoy = (decoy + 1) % NUM_VALUES;
        }
        table[k as usize] = VAL0 + decoy as TokenId;
    }
    for (j, &k) in chain.iter().enumerate() {
        table[k as usize] = if j + 1 < chain.len() {
            KEY0 + chain[j + 1] as TokenId
        } else {
            goal
        };
    }
    (table, goal)
}

fn parse_task_id(task_id: &str) -> Option<(usize, usize)> {
    // "lookup_d<depth>_<idx>"
    let rest = task_id.strip_prefix("lookup_d")?;
    let (depth, idx) = rest.split_once('_')?;
    Some((depth.parse().ok()?, idx.parse().ok()?))
}

#[derive(Debug, Clone)]
pub struct LookupEnv {
    table: [TokenId; NUM_KEYS as usize],
    goal_value: TokenId,
    question: Vec<TokenId>,
    horizon: usize,
    last: Option<(TokenId, TokenId)>,
    turn: usize,
    done: bool,
}

impl LookupEnv {
    pub fn reset(task: &Task, _rng: &mut RngStream) -> Result<(Self, Observation), EnvError> {
        let (depth, idx) = parse_task_id(&task.task_id)
            .filter(|&(d, _)| (1..=3).contains(&d))
            .ok_or_else(|| EnvError::UnknownTask(task.task_id.clone()))?;
        let (table, goal_value) = build_table(idx, depth);
        let env = Self {
            table,
            goal_value,
            question: task.description.clone(),
            horizon: task.horizon,
            last: None,
            turn: 0,
            done: false,
        };
        let obs = env.observe(T_OK);
        Ok((env, obs))
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn turn_index(&self) -> usize {
        self.turn
    }

    pub fn state_key(&self) -> Vec<u32> {
        vec![
            self.done as u32,
            self.last.map(|(k, _)| k + 1).unwrap_or(0),
            self.last.map(|(_, v)| v + 1).unwrap_or(0),
        ]
    }

    fn observe(&self, status: TokenId) -> Observation {
        let mut tokens = vec![status];
        tokens.extend_from_slice(&self.question);
        tokens.push(SEP);
        match self.last {
            Some((k, v)) => {
                tokens.push(k);
                tokens.push(v);
            }
            None => tokens.push(T_NOTHING),
        }
        Observation {
            tokens,
            turn_index: self.turn,
            admissible: self.admissible_actions(),
        }
    }

    fn admissible_actions(&self) -> Vec<Vec<TokenId>> {
        let mut actions = Vec::new();
        for k in 0..NUM_KEYS {
            actions.push(vec![T_QUERY, KEY0 + k as TokenId, END]);
        }
        for v in 0..NUM_VALUES {
            actions.push(vec![T_ANSWER, VAL0 + v as TokenId, END]);
        }
        actions
    }

    pub fn admissible(&self) -> Result<Vec<Vec<TokenId>>, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        Ok(self.admissible_actions())
    }

    pub fn step(&mut self, action: &[TokenId]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let mut reward = 0.0;
        let status = match action_content(action) {
            Some([T_QUERY, key]) if (KEY0..KEY0 + NUM_KEYS as TokenId).contains(key) => {
                let result = self.table[(key - KEY0) as usize];
                self.last = Some((*key, result));
                T_OK
            }
            Some([T_ANSWER, value]) if (VAL0..VAL0 + NUM_VALUES as TokenId).contains(value) => {
                if *value == self.goal_value {
                    reward = 1.0;
                }
                self.done = true;
                T_OK
            }
            _ => T_INVALID,
        };
        self.turn += 1;
        if self.turn >= self.horizon {
            self.done = true;
        }
        Ok(StepOutcome { obs: self.observe(status), reward, done: self.done })
    }
}

pub(super) fn builtin_catalog() -> Catalog {
    let vocab = Vocab::default_64();
    let mut tasks = Vec::new();
    for depth in 1..=3usize {
        for idx in 0..TASKS_PER_DEPTH {
            let (chain, value) = chain_spec(idx, depth);
            let start_tok = KEY0 + chain[0] as TokenId;
            let mut skill_tokens = Vec::new();
            for &k in &chain {
                skill_tokens.push(T_QUERY);
                skill_tokens.push(KEY0 + k as TokenId);
            }
            skill_tokens.push(T_ANSWER);
            skill_tokens.push(VAL0 + value as TokenId);
            let task = Task {
                task_id: format!("lookup_d{depth}_{idx}"),
                task_type: format!("lookup_d{depth}"),
                description: vec![T_QUESTION, start_tok],
                horizon: DEFAULT_HORIZON,
            };
            let skill = SkillText {
                tokens: skill_tokens,
                keywords: [vocab.token(start_tok).to_string()].into_iter().collect(),
                quality: SkillQuality::Informative,
            };
            tasks.push(CatalogTask { task, skill });
        }
    }
    let filler = vocab.id("f10").unwrap();
    let distractor_skills = (0..2)
        .map(|i| SkillText {
            tokens: (0..5).map(|j| filler + (i * 5 + j) as TokenId).collect(),
            keywords: [format!("noise{i}")].into_iter().collect(),
            quality: SkillQuality::Distractor,
        })
        .collect();
    Catalog { kind: EnvKind::LookupQa, vocab, tasks, distractor_skills }
}

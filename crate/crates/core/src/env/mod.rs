//! Synthetic multi-turn token environments with privileged skill text.
//!
//! Two built-in environments stand in for full-scale agent benchmarks:
//! [`TreasureRooms`](treasure::TreasureEnv) (rooms/objects, "put X in Y"
//! tasks) and [`LookupQA`](lookup::LookupEnv) (answering requires 1-3 chained
//! key lookups in a hidden table). Each turn's action is a short token
//! sequence terminated by `END`; rewards are sparse (1.0 exactly on goal
//! completion) and environment-injected observation tokens never enter the
//! flattened response sequence.

mod lookup;
mod oracle;
mod treasure;

pub use lookup::LookupEnv;
pub use oracle::{bfs_success_path, random_walk_success_prob};
pub use treasure::TreasureEnv;

use crate::numkit::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const END: TokenId = 1;
pub const SEP: TokenId = 2;

/// Maximum number of content tokens in one action (END excluded).
pub const L_RESP: usize = 4;

/// Maximum skill length in tokens.
pub const MAX_SKILL_TOKENS: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("catalog document invalid: {0}")]
    BadCatalog(String),
}

/// Dense token alphabet shared by both environments. Ids 0..V-1 with the
/// reserved tokens PAD=0, END=1, SEP=2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// The default 64-token alphabet.
    pub fn default_64() -> Self {
        let mut tokens: Vec<String> = [
            "PAD", "END", "SEP", "goto", "take", "put", "roomA", "roomB", "roomC", "roomD",
            "key", "gem", "ball", "book", "coin", "lamp", "box", "chest", "shelf", "desk",
            "query", "answer", "k0", "k1", "k2", "k3", "k4", "k5", "k6", "k7", "v0", "v1",
            "v2", "v3", "v4", "v5", "v6", "v7", "at", "holding", "question", "ok", "invalid",
            "nothing",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..20 {
            tokens.push(format!("f{i}"));
        }
        debug_assert_eq!(tokens.len(), 64);
        Self { tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token).map(|i| i as TokenId)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn ids(&self, tokens: &[&str]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t).expect("token in vocab")).collect()
    }

    pub fn strings(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillQuality {
    Informative,
    Distractor,
}

/// Privileged training-only context: a compact token sequence spelling the
/// task's optimal action subsequence (informative) or unrelated filler
/// (distractor), plus retrieval keywords.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillText {
    pub tokens: Vec<TokenId>,
    pub keywords: BTreeSet<String>,
    pub quality: SkillQuality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: String,
    pub task_type: String,
    pub description: Vec<TokenId>,
    pub horizon: usize,
}

/// One agent-facing observation: injected tokens, the turn counter, and the
/// currently admissible actions (each ends with END, length <= L_RESP).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub tokens: Vec<TokenId>,
    pub turn_index: usize,
    pub admissible: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TreasureRooms,
    LookupQa,
}

impl EnvKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "treasure_rooms" => Some(Self::TreasureRooms),
            "lookup_qa" => Some(Self::LookupQa),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TreasureRooms => "treasure_rooms",
            Self::LookupQa => "lookup_qa",
        }
    }
}

/// A running episode of either environment. Single-owner per episode; clone
/// freely to fork search states (the BFS oracle relies on this).
#[derive(Debug, Clone)]
pub enum AnyEnv {
    Treasure(TreasureEnv),
    Lookup(LookupEnv),
}

impl AnyEnv {
    pub fn step(&mut self, action: &[TokenId]) -> Result<StepOutcome, EnvError> {
        match self {
            AnyEnv::Treasure(e) => e.step(action),
            AnyEnv::Lookup(e) => e.step(action),
        }
    }

    pub fn admissible(&self) -> Result<Vec<Vec<TokenId>>, EnvError> {
        match self {
            AnyEnv::Treasure(e) => e.admissible(),
            AnyEnv::Lookup(e) => e.admissible(),
        }
    }

    pub fn done(&self) -> bool {
        match self {
            AnyEnv::Treasure(e) => e.done(),
            AnyEnv::Lookup(e) => e.done(),
        }
    }

    pub fn turn_index(&self) -> usize {
        match self {
            AnyEnv::Treasure(e) => e.turn_index(),
            AnyEnv::Lookup(e) => e.turn_index(),
        }
    }

    /// Canonical encoding of the mutable episode state, used for search
    /// deduplication and determinism checks.
    pub fn state_key(&self) -> Vec<u32> {
        match self {
            AnyEnv::Treasure(e) => e.state_key(),
            AnyEnv::Lookup(e) => e.state_key(),
        }
    }
}

/// A catalog entry: one task plus its authored informative skill.
#[derive(Debug, Clone)]
pub struct CatalogTask {
    pub task: Task,
    pub skill: SkillText,
}

/// Environment catalog: env kind, tasks with authored skills, and extra
/// distractor skills for the retrieval experiments.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub kind: EnvKind,
    pub vocab: Vocab,
    pub tasks: Vec<CatalogTask>,
    pub distractor_skills: Vec<SkillText>,
}

impl Catalog {
    pub fn builtin(kind: EnvKind) -> Self {
        match kind {
            EnvKind::TreasureRooms => treasure::builtin_catalog(),
            EnvKind::LookupQa => lookup::builtin_catalog(),
        }
    }

    pub fn find(&self, task_id: &str) -> Result<&CatalogTask, EnvError> {
        self.tasks
            .iter()
            .find(|t| t.task.task_id == task_id)
            .ok_or_else(|| EnvError::UnknownTask(task_id.to_string()))
    }

    /// The authored informative skill for a registered task.
    pub fn skill_for(&self, task_id: &str) -> Result<&SkillText, EnvError> {
        Ok(&self.find(task_id)?.skill)
    }

    /// Start an episode: returns the env holding the post-reset state and the
    /// initial observation. Deterministic in `(task_id, rng seed/stream)`.
    pub fn reset(&self, task_id: &str, rng: &mut RngStream) -> Result<(AnyEnv, Observation), EnvError> {
        let entry = self.find(task_id)?;
        match self.kind {
            EnvKind::TreasureRooms => {
                let (env, obs) = TreasureEnv::reset(&entry.task, rng)?;
                Ok((AnyEnv::Treasure(env), obs))
            }
            EnvKind::LookupQa => {
                let (env, obs) = LookupEnv::reset(&entry.task, rng)?;
                Ok((AnyEnv::Lookup(env), obs))
            }
        }
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task.task_id.clone()).collect()
    }
}

// --------------------------------------------------------------------------
// JSON document I/O
// --------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SkillDoc {
    tokens: Vec<String>,
    keywords: Vec<String>,
    quality: SkillQuality,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskDoc {
    task_id: String,
    task_type: String,
    description: Vec<String>,
    horizon: usize,
    skill: SkillDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogDoc {
    env: String,
    tasks: Vec<TaskDoc>,
    #[serde(default)]
    distractor_skills: Vec<SkillDoc>,
}

fn skill_to_doc(skill: &SkillText, vocab: &Vocab) -> SkillDoc {
    SkillDoc {
        tokens: vocab.strings(&skill.tokens),
        keywords: skill.keywords.iter().cloned().collect(),
        quality: skill.quality,
    }
}

fn skill_from_doc(doc: &SkillDoc, vocab: &Vocab) -> Result<SkillText, EnvError> {
    if doc.tokens.len() > MAX_SKILL_TOKENS {
        return Err(EnvError::BadCatalog(format!(
            "skill exceeds {MAX_SKILL_TOKENS} tokens"
        )));
    }
    let tokens = doc
        .tokens
        .iter()
        .map(|t| vocab.id(t).ok_or_else(|| EnvError::BadCatalog(format!("unknown token: {t}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SkillText {
        tokens,
        keywords: doc.keywords.iter().cloned().collect(),
        quality: doc.quality,
    })
}

impl Catalog {
    pub fn to_json(&self) -> String {
        let doc = CatalogDoc {
            env: self.kind.name().to_string(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskDoc {
                    task_id: t.task.task_id.clone(),
                    task_type: t.task.task_type.clone(),
                    description: self.vocab.strings(&t.task.description),
                    horizon: t.task.horizon,
                    skill: skill_to_doc(&t.skill, &self.vocab),
                })
                .collect(),
            distractor_skills: self
                .distractor_skills
                .iter()
                .map(|s| skill_to_doc(s, &self.vocab))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("catalog serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let doc: CatalogDoc =
            serde_json::from_str(text).map_err(|e| EnvError::BadCatalog(e.to_string()))?;
        let kind = EnvKind::parse(&doc.env)
            .ok_or_else(|| EnvError::BadCatalog(format!("unknown env: {}", doc.env)))?;
        let vocab = Vocab::default_64();
        let mut tasks = Vec::new();
        for t in &doc.tasks {
            if t.horizon == 0 || t.horizon > 16 {
                return Err(EnvError::BadCatalog(format!(
                    "task {} horizon out of range",
                    t.task_id
                )));
            }
            let description = t
                .description
                .iter()
                .map(|s| {
                    vocab
                        .id(s)
                        .ok_or_else(|| EnvError::BadCatalog(format!("unknown token: {s}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            tasks.push(CatalogTask {
                task: Task {
                    task_id: t.task_id.clone(),
                    task_type: t.task_type.clone(),
                    description,
                    horizon: t.horizon,
                },
                skill: skill_from_doc(&t.skill, &vocab)?,
            });
        }
        let distractor_skills = doc
            .distractor_skills
            .iter()
            .map(|s| skill_from_doc(s, &vocab))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { kind, vocab, tasks, distractor_skills })
    }
}

/// Strip one trailing END (if present) and reject sequences that still
/// contain reserved tokens or exceed the length bound.
pub(crate) fn action_content(action: &[TokenId]) -> Option<&[TokenId]> {
    let content = match action.split_last() {
        Some((&END, rest)) => rest,
        _ => action,
    };
    if content.is_empty() || content.len() > L_RESP {
        return None;
    }
    if content.iter().any(|&t| t == PAD || t == END || t == SEP) {
        return None;
    }
    Some(content)
}

//! TreasureRooms: four rooms, portable objects, one fixed container per room,
//! tasks of the form "put X in Y". Sparse terminal reward.

use super::{
    action_content, Catalog, CatalogTask, EnvError, EnvKind, Observation, SkillQuality,
    SkillText, StepOutcome, Task, TokenId, Vocab, END, SEP,
};
use crate::numkit::RngStream;

const T_GOTO: TokenId = 3;
const T_TAKE: TokenId = 4;
const T_PUT: TokenId = 5;
const ROOM0: TokenId = 6; // roomA..roomD are 6..9
const OBJ0: TokenId = 10; // key gem ball book coin lamp are 10..15
const CONT0: TokenId = 16; // box chest shelf desk are 16..19
const T_AT: TokenId = 38;
const T_HOLDING: TokenId = 39;
const T_OK: TokenId = 41;
const T_INVALID: TokenId = 42;
const T_NOTHING: TokenId = 43;

const NUM_ROOMS: u8 = 4;
const NUM_OBJECTS: u8 = 6;
const NUM_CONTAINERS: u8 = 4;
/// Objects that appear as task goals; the remaining two are scenery.
const NUM_GOAL_OBJECTS: u8 = 4;
const DEFAULT_HORIZON: usize = 8;

/// Container `c` sits permanently in room `c`.
fn container_room(cont: u8) -> u8 {
    cont
}

/// Deterministic starting room for a task's goal object. Never the agent's
/// starting room (room 0), so every task needs at least three turns.
fn goal_object_room(obj: u8, cont: u8) -> u8 {
    1 + (obj + cont) % 3
}

#[derive(Debug, Clone)]
pub struct TreasureEnv {
    goal_obj: u8,
    goal_cont: u8,
    horizon: usize,
    agent_room: u8,
    held: Option<u8>,
    obj_rooms: [u8; NUM_OBJECTS as usize],
    turn: usize,
    done: bool,
}

impl TreasureEnv {
    pub fn reset(task: &Task, rng: &mut RngStream) -> Result<(Self, Observation), EnvError> {
        let (goal_obj, goal_cont) = parse_goal(task)
            .ok_or_else(|| EnvError::UnknownTask(task.task_id.clone()))?;
        let mut obj_rooms = [0u8; NUM_OBJECTS as usize];
        for obj in 0..NUM_OBJECTS {
            if obj == goal_obj {
                obj_rooms[obj as usize] = goal_object_room(goal_obj, goal_cont);
            } else {
                obj_rooms[obj as usize] = rng.index(NUM_ROOMS as usize) as u8;
            }
        }
        let env = Self {
            goal_obj,
            goal_cont,
            horizon: task.horizon,
            agent_room: 0,
            held: None,
            obj_rooms,
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
        let mut key = vec![
            self.done as u32,
            self.agent_room as u32,
            self.held.map(|o| o as u32 + 1).unwrap_or(0),
        ];
        key.extend(self.obj_rooms.iter().map(|&r| r as u32));
        key
    }

    fn objects_in_room(&self, room: u8) -> Vec<u8> {
        (0..NUM_OBJECTS)
            .filter(|&o| self.obj_rooms[o as usize] == room && self.held != Some(o))
            .collect()
    }

    fn observe(&self, status: TokenId) -> Observation {
        let mut tokens = vec![
            status,
            T_AT,
            ROOM0 + self.agent_room as TokenId,
            CONT0 + self.agent_room as TokenId,
            SEP,
        ];
        for o in self.objects_in_room(self.agent_room) {
            tokens.push(OBJ0 + o as TokenId);
        }
        tokens.push(SEP);
        tokens.push(T_HOLDING);
        tokens.push(match self.held {
            Some(o) => OBJ0 + o as TokenId,
            None => T_NOTHING,
        });
        Observation {
            tokens,
            turn_index: self.turn,
            admissible: self.admissible_actions(),
        }
    }

    fn admissible_actions(&self) -> Vec<Vec<TokenId>> {
        let mut actions = Vec::new();
        for r in 0..NUM_ROOMS {
            if r != self.agent_room {
                actions.push(vec![T_GOTO, ROOM0 + r as TokenId, END]);
            }
        }
        if self.held.is_none() {
            for o in self.objects_in_room(self.agent_room) {
                actions.push(vec![T_TAKE, OBJ0 + o as TokenId, END]);
            }
        }
        if let Some(o) = self.held {
            let cont = self.agent_room; // container c lives in room c
            actions.push(vec![T_PUT, OBJ0 + o as TokenId, CONT0 + cont as TokenId, END]);
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
        let status = match action_content(action).map(|c| self.apply(c)) {
            Some(Apply::Ok) => T_OK,
            Some(Apply::Goal) => {
                reward = 1.0;
                self.done = true;
                T_OK
            }
            Some(Apply::NoEffect) => T_NOTHING,
            Some(Apply::Malformed) | None => T_INVALID,
        };
        self.turn += 1;
        if self.turn >= self.horizon {
            self.done = true;
        }
        Ok(StepOutcome { obs: self.observe(status), reward, done: self.done })
    }

    fn apply(&mut self, content: &[TokenId]) -> Apply {
        match content {
            [T_GOTO, room] if (ROOM0..ROOM0 + NUM_ROOMS as TokenId).contains(room) => {
                self.agent_room = (room - ROOM0) as u8;
                Apply::Ok
            }
            [T_TAKE, obj] if (OBJ0..OBJ0 + NUM_OBJECTS as TokenId).contains(obj) => {
                let o = (obj - OBJ0) as u8;
                if self.held.is_none() && self.objects_in_room(self.agent_room).contains(&o) {
                    self.held = Some(o);
                    Apply::Ok
                } else {
                    Apply::NoEffect
                }
            }
            [T_PUT, obj, cont]
                if (OBJ0..OBJ0 + NUM_OBJECTS as TokenId).contains(obj)
                    && (CONT0..CONT0 + NUM_CONTAINERS as TokenId).contains(cont) =>
            {
                let o = (obj - OBJ0) as u8;
                let c = (cont - CONT0) as u8;
                if self.held == Some(o) && container_room(c) == self.agent_room {
                    if o == self.goal_obj && c == self.goal_cont {
                        Apply::Goal
                    } else {
                        // Dropped in the room, not trapped: stays retakable.
                        self.held = None;
                        self.obj_rooms[o as usize] = self.agent_room;
                        Apply::Ok
                    }
                } else {
                    Apply::NoEffect
                }
            }
            _ => Apply::Malformed,
        }
    }
}

enum Apply {
    Ok,
    Goal,
    NoEffect,
    Malformed,
}

fn parse_goal(task: &Task) -> Option<(u8, u8)> {
    match task.description.as_slice() {
        [T_PUT, obj, cont]
            if (OBJ0..OBJ0 + NUM_GOAL_OBJECTS as TokenId).contains(obj)
                && (CONT0..CONT0 + NUM_CONTAINERS as TokenId).contains(cont) =>
        {
            Some(((obj - OBJ0) as u8, (cont - CONT0) as u8))
        }
        _ => None,
    }
}

/// Optimal action-content tokens for a task, used to author its skill.
fn optimal_plan_tokens(obj: u8, cont: u8) -> Vec<TokenId> {
    let obj_room = goal_object_room(obj, cont);
    let cont_room = container_room(cont);
    let mut tokens = vec![T_GOTO, ROOM0 + obj_room as TokenId, T_TAKE, OBJ0 + obj as TokenId];
    if cont_room != obj_room {
        tokens.push(T_GOTO);
        tokens.push(ROOM0 + cont_room as TokenId);
    }
    tokens.push(T_PUT);
    tokens.push(OBJ0 + obj as TokenId);
    tokens.push(CONT0 + cont as TokenId);
    tokens
}

pub(super) fn builtin_catalog() -> Catalog {
    let vocab = Vocab::default_64();
    let mut tasks = Vec::new();
    for obj in 0..NUM_GOAL_OBJECTS {
        for cont in 0..NUM_CONTAINERS {
            let obj_name = vocab.token(OBJ0 + obj as TokenId).to_string();
            let cont_name = vocab.token(CONT0 + cont as TokenId).to_string();
            let task = Task {
                task_id: format!("put_{obj_name}_{cont_name}"),
                task_type: format!("deliver_{cont_name}"),
                description: vec![T_PUT, OBJ0 + obj as TokenId, CONT0 + cont as TokenId],
                horizon: DEFAULT_HORIZON,
            };
            let skill = SkillText {
                tokens: optimal_plan_tokens(obj, cont),
                keywords: [obj_name, cont_name].into_iter().collect(),
                quality: SkillQuality::Informative,
            };
            tasks.push(CatalogTask { task, skill });
        }
    }
    let filler0 = vocab.id("f0").unwrap();
    let distractor_skills = (0..4)
        .map(|i| SkillText {
            tokens: (0..5).map(|j| filler0 + (i * 5 + j) as TokenId).collect(),
            keywords: [format!("spurious{i}")].into_iter().collect(),
            quality: SkillQuality::Distractor,
        })
        .collect();
    Catalog { kind: EnvKind::TreasureRooms, vocab, tasks, distractor_skills }
}

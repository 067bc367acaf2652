//! Skill library with four retrieval strategies (UCB bandit, keyword
//! matching, full concatenation, random) and reward-feedback bookkeeping.

use crate::env::{Catalog, SkillQuality, SkillText, TokenId, Vocab, SEP};
use crate::numkit::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Token cap for the `full` strategy's concatenated context.
pub const FULL_CONTEXT_CAP: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("skill bank is empty")]
    EmptyBank,
    #[error("unknown skill entry: {0}")]
    UnknownEntry(usize),
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStrategy {
    Ucb,
    Km,
    Full,
    Random,
}

/// One bank entry: the skill plus its bandit statistics. `n == 0` implies
/// `r_bar == 0`; once pulled, `r_bar` stays in [0, 1].
#[derive(Debug, Clone)]
pub struct SkillEntry {
    pub id: usize,
    pub skill: SkillText,
    pub r_bar: f64,
    pub n: u64,
}

/// Skill bank: entries in id order, per-task-type query counters, and the
/// UCB exploration constant.
#[derive(Debug, Clone)]
pub struct SkillBank {
    entries: Vec<SkillEntry>,
    n_ucb: BTreeMap<String, u64>,
    pub c_ucb: f64,
}

impl SkillBank {
    pub fn new(skills: Vec<SkillText>, c_ucb: f64) -> Self {
        let entries = skills
            .into_iter()
            .enumerate()
            .map(|(id, skill)| SkillEntry { id, skill, r_bar: 0.0, n: 0 })
            .collect();
        Self { entries, n_ucb: BTreeMap::new(), c_ucb }
    }

    /// Bank built from a catalog document: each task's authored skill first
    /// (in task order), then the distractor skills.
    pub fn from_catalog(catalog: &Catalog, c_ucb: f64) -> Self {
        let mut skills: Vec<SkillText> =
            catalog.tasks.iter().map(|t| t.skill.clone()).collect();
        skills.extend(catalog.distractor_skills.iter().cloned());
        Self::new(skills, c_ucb)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, id: usize) -> Option<&SkillEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[SkillEntry] {
        &self.entries
    }

    pub fn queries_for(&self, task_type: &str) -> u64 {
        self.n_ucb.get(task_type).copied().unwrap_or(0)
    }

    /// UCB1 selection: argmax of `r_bar + c * sqrt(ln N / n)` with untried
    /// entries scoring +inf and ties breaking to the lowest id. Increments
    /// the task type's query counter after selecting.
    pub fn ucb_select(&mut self, task_type: &str) -> Result<usize, BankError> {
        if self.entries.is_empty() {
            return Err(BankError::EmptyBank);
        }
        let n_queries = self.queries_for(task_type);
        let mut best: Option<(usize, f64)> = None;
        for e in &self.entries {
            let score = self.ucb_score(e, n_queries);
            let better = match best {
                None => true,
                Some((_, b)) => score > b,
            };
            if better {
                best = Some((e.id, score));
            }
        }
        *self.n_ucb.entry(task_type.to_string()).or_insert(0) += 1;
        Ok(best.expect("non-empty bank").0)
    }

    /// Score of one entry under the current counter for `n_queries` prior
    /// queries. `ln N` is evaluated with N >= 1; untried entries score +inf.
    pub fn ucb_score(&self, entry: &SkillEntry, n_queries: u64) -> f64 {
        if entry.n == 0 {
            return f64::INFINITY;
        }
        let n_total = n_queries.max(1) as f64;
        entry.r_bar + self.c_ucb * (n_total.ln() / entry.n as f64).sqrt()
    }

    /// First entry (by id) whose keyword set intersects the description's
    /// token strings; None when nothing matches.
    pub fn km_select(&self, description: &[TokenId], vocab: &Vocab) -> Result<Option<usize>, BankError> {
        if self.entries.is_empty() {
            return Err(BankError::EmptyBank);
        }
        let words: Vec<&str> = description.iter().map(|&t| vocab.token(t)).collect();
        Ok(self
            .entries
            .iter()
            .find(|e| e.skill.keywords.iter().any(|k| words.contains(&k.as_str())))
            .map(|e| e.id))
    }

    /// Strategy dispatch. Returns the selected skill text (owned; the full
    /// strategy synthesizes a concatenation) plus the entry id when a single
    /// entry was chosen.
    pub fn select(
        &mut self,
        strategy: RetrievalStrategy,
        task_type: &str,
        description: &[TokenId],
        vocab: &Vocab,
        rng: &mut RngStream,
    ) -> Result<Option<(SkillText, Option<usize>)>, BankError> {
        if self.entries.is_empty() {
            return Err(BankError::EmptyBank);
        }
        match strategy {
            RetrievalStrategy::Ucb => {
                let id = self.ucb_select(task_type)?;
                Ok(Some((self.entries[id].skill.clone(), Some(id))))
            }
            RetrievalStrategy::Km => Ok(self
                .km_select(description, vocab)?
                .map(|id| (self.entries[id].skill.clone(), Some(id)))),
            RetrievalStrategy::Full => {
                let mut tokens = Vec::new();
                for (i, e) in self.entries.iter().enumerate() {
                    if i > 0 {
                        tokens.push(SEP);
                    }
                    tokens.extend_from_slice(&e.skill.tokens);
                }
                tokens.truncate(FULL_CONTEXT_CAP);
                Ok(Some((
                    SkillText {
                        tokens,
                        keywords: Default::default(),
                        quality: SkillQuality::Informative,
                    },
                    None,
                )))
            }
            RetrievalStrategy::Random => {
                let id = rng.index(self.entries.len());
                Ok(Some((self.entries[id].skill.clone(), Some(id))))
            }
        }
    }

    /// Incremental-mean reward update: `n += 1; r_bar += (reward - r_bar)/n`.
    pub fn update_reward(&mut self, entry_id: usize, reward: f64) -> Result<&SkillEntry, BankError> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(BankError::RewardOutOfRange(reward));
        }
        let entry = self
            .entries
            .get_mut(entry_id)
            .ok_or(BankError::UnknownEntry(entry_id))?;
        entry.n += 1;
        entry.r_bar += (reward - entry.r_bar) / entry.n as f64;
        Ok(entry)
    }

    /// Per-entry statistics sidecar, written after each training step.
    pub fn stats_json(&self) -> String {
        #[derive(Serialize)]
        struct Stat {
            id: usize,
            r_bar: f64,
            n: u64,
        }
        #[derive(Serialize)]
        struct Doc {
            entries: Vec<Stat>,
            n_ucb: BTreeMap<String, u64>,
        }
        let doc = Doc {
            entries: self
                .entries
                .iter()
                .map(|e| Stat { id: e.id, r_bar: e.r_bar, n: e.n })
                .collect(),
            n_ucb: self.n_ucb.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("stats serialize")
    }

    /// Restore per-entry statistics from a sidecar document.
    pub fn load_stats(&mut self, text: &str) -> Result<(), serde_json::Error> {
        #[derive(Deserialize)]
        struct Stat {
            id: usize,
            r_bar: f64,
            n: u64,
        }
        #[derive(Deserialize)]
        struct Doc {
            entries: Vec<Stat>,
            #[serde(default)]
            n_ucb: BTreeMap<String, u64>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        for s in doc.entries {
            if let Some(e) = self.entries.get_mut(s.id) {
                e.r_bar = s.r_bar;
                e.n = s.n;
            }
        }
        self.n_ucb = doc.n_ucb;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Catalog, EnvKind};

    fn two_entry_bank(stats: &[(f64, u64)]) -> SkillBank {
        let vocab = Vocab::default_64();
        let skills: Vec<SkillText> = (0..stats.len())
            .map(|i| SkillText {
                tokens: vec![vocab.id("f0").unwrap() + i as TokenId],
                keywords: [format!("w{i}")].into_iter().collect(),
                quality: SkillQuality::Informative,
            })
            .collect();
        let mut bank = SkillBank::new(skills, 1.0);
        for (i, &(r, n)) in stats.iter().enumerate() {
            bank.entries[i].r_bar = r;
            bank.entries[i].n = n;
        }
        bank
    }

    #[test]
    fn ucb_prefers_higher_score() {
        // Frozen oracle values from a 40-digit evaluation of
        // r + sqrt(ln 12 / n): 1.298488379983726 and 1.614653903637358.
        let mut bank = two_entry_bank(&[(0.8, 10), (0.5, 2)]);
        bank.n_ucb.insert("t".into(), 12);
        let s0 = bank.ucb_score(&bank.entries[0], 12);
        let s1 = bank.ucb_score(&bank.entries[1], 12);
        assert!((s0 - 1.298488379983726).abs() < 1e-12, "{s0}");
        assert!((s1 - 1.614653903637358).abs() < 1e-12, "{s1}");
        assert_eq!(bank.ucb_select("t").unwrap(), 1);
        assert_eq!(bank.queries_for("t"), 13);
    }

    #[test]
    fn ucb_prefers_untried_entries() {
        let mut bank = two_entry_bank(&[(0.9, 50), (0.0, 0), (0.0, 0)]);
        bank.n_ucb.insert("t".into(), 50);
        // Both untried entries score +inf; lowest id wins.
        assert_eq!(bank.ucb_select("t").unwrap(), 1);
    }

    #[test]
    fn ucb_ties_break_to_lowest_id() {
        let mut bank = two_entry_bank(&[(0.5, 4), (0.5, 4), (0.5, 4)]);
        bank.n_ucb.insert("t".into(), 12);
        assert_eq!(bank.ucb_select("t").unwrap(), 0);
    }

    #[test]
    fn ucb_score_decreases_in_n() {
        let bank = two_entry_bank(&[(0.5, 1)]);
        let mut prev = f64::INFINITY;
        for n in 1..20 {
            let e = SkillEntry { n, ..bank.entries[0].clone() };
            let s = bank.ucb_score(&e, 100);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn ucb_empty_bank_errors() {
        let mut bank = SkillBank::new(vec![], 1.0);
        assert_eq!(bank.ucb_select("t").unwrap_err(), BankError::EmptyBank);
    }

    #[test]
    fn km_first_match_by_id() {
        let vocab = Vocab::default_64();
        let mut bank = two_entry_bank(&[(0.0, 0), (0.0, 0)]);
        bank.entries[0].skill.keywords = ["gem".to_string()].into_iter().collect();
        bank.entries[1].skill.keywords = ["key".to_string(), "gem".to_string()].into_iter().collect();
        let desc = vocab.ids(&["put", "gem", "box"]);
        assert_eq!(bank.km_select(&desc, &vocab).unwrap(), Some(0));
        let desc_key = vocab.ids(&["put", "key", "box"]);
        assert_eq!(bank.km_select(&desc_key, &vocab).unwrap(), Some(1));
        let desc_none = vocab.ids(&["put", "ball", "box"]);
        assert_eq!(bank.km_select(&desc_none, &vocab).unwrap(), None);
    }

    #[test]
    fn full_concatenation_arithmetic() {
        let vocab = Vocab::default_64();
        let skills: Vec<SkillText> = (0..3)
            .map(|i| SkillText {
                tokens: vec![vocab.id("f1").unwrap() + i as TokenId; 8],
                keywords: Default::default(),
                quality: SkillQuality::Informative,
            })
            .collect();
        let mut bank = SkillBank::new(skills, 1.0);
        let mut rng = RngStream::new(0, 0);
        let (skill, id) = bank
            .select(RetrievalStrategy::Full, "t", &[], &vocab, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(skill.tokens.len(), 26); // 8 + 1 + 8 + 1 + 8
        assert_eq!(id, None);
    }

    #[test]
    fn random_selection_is_reproducible_and_near_uniform() {
        let vocab = Vocab::default_64();
        let mut bank = two_entry_bank(&[(0.0, 0), (0.0, 0), (0.0, 0), (0.0, 0)]);
        let mut r1 = RngStream::new(11, 3);
        let mut r2 = RngStream::new(11, 3);
        for _ in 0..32 {
            let a = bank.select(RetrievalStrategy::Random, "t", &[], &vocab, &mut r1).unwrap();
            let b = bank.select(RetrievalStrategy::Random, "t", &[], &vocab, &mut r2).unwrap();
            assert_eq!(a.unwrap().1, b.unwrap().1);
        }
        // Frequencies over 1e4 draws within the binomial band [0.225, 0.275].
        let mut counts = [0usize; 4];
        let mut rng = RngStream::new(5, 9);
        for _ in 0..10_000 {
            let (_, id) = bank
                .select(RetrievalStrategy::Random, "t", &[], &vocab, &mut rng)
                .unwrap()
                .unwrap();
            counts[id.unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.225..=0.275).contains(&f), "{f}");
        }
    }

    #[test]
    fn update_reward_incremental_mean() {
        let mut bank = two_entry_bank(&[(0.5, 2)]);
        let e = bank.update_reward(0, 1.0).unwrap();
        assert!((e.r_bar - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.n, 3);

        let mut fresh = two_entry_bank(&[(0.0, 0)]);
        let e = fresh.update_reward(0, 0.0).unwrap();
        assert_eq!((e.r_bar, e.n), (0.0, 1));
        for r in [1.0, 0.0, 1.0] {
            fresh.update_reward(0, r).unwrap();
        }
        let e = fresh.entry(0).unwrap();
        assert_eq!(e.n, 4);
        assert!((e.r_bar - 0.5).abs() < 1e-15);
    }

    #[test]
    fn update_reward_error_paths() {
        let mut bank = two_entry_bank(&[(0.0, 0)]);
        assert_eq!(bank.update_reward(9, 0.5).unwrap_err(), BankError::UnknownEntry(9));
        assert_eq!(
            bank.update_reward(0, 1.5).unwrap_err(),
            BankError::RewardOutOfRange(1.5)
        );
    }

    #[test]
    fn running_mean_matches_exact_mean() {
        let mut bank = two_entry_bank(&[(0.0, 0)]);
        let mut rng = RngStream::new(42, 0);
        let rewards: Vec<f64> = (0..257).map(|_| rng.next_f64()).collect();
        for &r in &rewards {
            bank.update_reward(0, r).unwrap();
        }
        let exact = rewards.iter().sum::<f64>() / rewards.len() as f64;
        assert!((bank.entry(0).unwrap().r_bar - exact).abs() < 1e-12);
    }

    #[test]
    fn bandit_two_arm_sanity() {
        // Arm 0 always rewards 1 when supplied, arm 1 rewards 0. Queries
        // 101..=200 must pick arm 0 at least 90% of the time.
        for seed in 0..5u64 {
            let mut bank = two_entry_bank(&[(0.0, 0), (0.0, 0)]);
            let mut rng = RngStream::new(seed, 77);
            let _ = &mut rng; // selection is deterministic; rng reserved for parity with other strategies
            let mut late_hits = 0;
            for q in 1..=200 {
                let id = bank.ucb_select("t").unwrap();
                let reward = if id == 0 { 1.0 } else { 0.0 };
                bank.update_reward(id, reward).unwrap();
                if q > 100 && id == 0 {
                    late_hits += 1;
                }
            }
            assert!(late_hits >= 90, "seed {seed}: {late_hits}/100");
        }
    }

    #[test]
    fn stats_sidecar_round_trip() {
        let cat = Catalog::builtin(EnvKind::TreasureRooms);
        let mut bank = SkillBank::from_catalog(&cat, 1.0);
        bank.ucb_select("deliver_box").unwrap();
        bank.update_reward(0, 1.0).unwrap();
        let text = bank.stats_json();
        let mut fresh = SkillBank::from_catalog(&cat, 1.0);
        fresh.load_stats(&text).unwrap();
        assert_eq!(fresh.entry(0).unwrap().n, 1);
        assert_eq!(fresh.queries_for("deliver_box"), 1);
    }
}

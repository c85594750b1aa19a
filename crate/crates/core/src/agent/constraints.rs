use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::grid::Coord;
use crate::plan::EnvConstraints;
use crate::unlearning::directives::Directives;

/// Behavioral constraints the agent is prompted with, keyed by environment.
/// Empty by default; the unlearning engine is the only writer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    forbidden_states: BTreeMap<String, BTreeSet<Coord>>,
    forbidden_sequences: BTreeMap<String, Vec<Vec<Coord>>>,
    degraded_envs: BTreeSet<String>,
}

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.forbidden_states.values().all(BTreeSet::is_empty)
            && self.forbidden_sequences.values().all(Vec::is_empty)
            && self.degraded_envs.is_empty()
    }

    pub fn for_env(&self, env_id: &str) -> EnvConstraints {
        EnvConstraints {
            forbidden: self.forbidden_states.get(env_id).cloned().unwrap_or_default(),
            sequences: self.forbidden_sequences.get(env_id).cloned().unwrap_or_default(),
            degraded: self.degraded_envs.contains(env_id),
        }
    }

    pub fn forbidden_states(&self, env_id: &str) -> impl Iterator<Item = Coord> + '_ {
        self.forbidden_states.get(env_id).into_iter().flatten().copied()
    }

    pub fn forbidden_sequences(&self, env_id: &str) -> &[Vec<Coord>] {
        self.forbidden_sequences
            .get(env_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_degraded(&self, env_id: &str) -> bool {
        self.degraded_envs.contains(env_id)
    }

    pub fn forbid_state(&mut self, env_id: &str, cell: Coord) {
        self.forbidden_states
            .entry(env_id.to_string())
            .or_default()
            .insert(cell);
    }

    pub fn forbid_sequence(&mut self, env_id: &str, seq: Vec<Coord>) {
        let list = self.forbidden_sequences.entry(env_id.to_string()).or_default();
        if !list.contains(&seq) {
            list.push(seq);
        }
    }

    pub fn degrade(&mut self, env_id: &str) {
        self.degraded_envs.insert(env_id.to_string());
    }

    /// Merges parsed directives. States and sequences attach to `env_id`;
    /// `FORGET-ENV` entries name their own environment.
    pub fn apply(&mut self, env_id: &str, directives: &Directives) {
        for &c in &directives.avoid_states {
            self.forbid_state(env_id, c);
        }
        for seq in &directives.sequences {
            self.forbid_sequence(env_id, seq.clone());
        }
        for env in &directives.forget_envs {
            self.degrade(env);
        }
    }

    pub fn merge(&mut self, other: &ConstraintSet) {
        for (env, cells) in &other.forbidden_states {
            for &c in cells {
                self.forbid_state(env, c);
            }
        }
        for (env, seqs) in &other.forbidden_sequences {
            for s in seqs {
                self.forbid_sequence(env, s.clone());
            }
        }
        for env in &other.degraded_envs {
            self.degrade(env);
        }
    }

    pub fn remove_states(&mut self, env_id: &str, cells: &BTreeSet<Coord>) {
        if let Some(set) = self.forbidden_states.get_mut(env_id) {
            set.retain(|c| !cells.contains(c));
        }
    }

    pub fn remove_sequence(&mut self, env_id: &str, seq: &[Coord]) {
        if let Some(list) = self.forbidden_sequences.get_mut(env_id) {
            list.retain(|s| s != seq);
        }
    }

    pub fn restore_env(&mut self, env_id: &str) {
        self.degraded_envs.remove(env_id);
    }
}

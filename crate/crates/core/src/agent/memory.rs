//! The agent's `(state, action, reward)` memory, persisted as one JSON
//! document keyed by environment id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, AgentState, Coord};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("memory json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub env_id: String,
    pub state: AgentState,
    pub action: Action,
    pub reward: f64,
}

/// Which entries an erasure removes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemorySelector {
    /// Entries whose position is one of `cells`.
    States { env_id: String, cells: BTreeSet<Coord> },
    /// Runs of consecutive entries whose moves walk `cells` in order.
    Sequence { env_id: String, cells: Vec<Coord> },
    /// Everything recorded in one environment.
    Env(String),
}

impl MemorySelector {
    pub fn env_id(&self) -> &str {
        match self {
            MemorySelector::States { env_id, .. }
            | MemorySelector::Sequence { env_id, .. }
            | MemorySelector::Env(env_id) => env_id,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    entries: BTreeMap<String, Vec<MemoryEntry>>,
    file_path: Option<PathBuf>,
    /// Erased targets that must not be re-recorded. Not persisted.
    protected: Vec<MemorySelector>,
}

/// Equality compares the stored entries only.
impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

#[derive(Serialize, Deserialize)]
struct EntryWire {
    state: Coord,
    collected: Vec<Coord>,
    action: Action,
    reward: f64,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_path(path: impl Into<PathBuf>) -> Self {
        Self {
            file_path: Some(path.into()),
            ..Self::default()
        }
    }

    pub fn file_path(&self) -> Option<&Path> {
        self.file_path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn env_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self, env_id: &str) -> &[MemoryEntry] {
        self.entries.get(env_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The last `k` entries recorded for `env_id`.
    pub fn recent(&self, env_id: &str, k: usize) -> &[MemoryEntry] {
        let all = self.entries(env_id);
        &all[all.len().saturating_sub(k)..]
    }

    /// Appends an entry unless it falls under a protected (previously
    /// erased) target.
    pub fn record(&mut self, entry: MemoryEntry) {
        if self.protected.iter().any(|sel| match sel {
            MemorySelector::Env(env) => *env == entry.env_id,
            MemorySelector::States { env_id, cells } => {
                *env_id == entry.env_id && cells.contains(&entry.state.position)
            }
            MemorySelector::Sequence { .. } => false,
        }) {
            return;
        }
        let env = entry.env_id.clone();
        self.entries.entry(env.clone()).or_default().push(entry);
        let seqs: Vec<MemorySelector> = self
            .protected
            .iter()
            .filter(|s| matches!(s, MemorySelector::Sequence { env_id, .. } if *env_id == env))
            .cloned()
            .collect();
        for sel in seqs {
            self.erase(&sel);
        }
    }

    /// Stops future recording of entries that match `selector`.
    pub fn protect(&mut self, selector: MemorySelector) {
        if !self.protected.contains(&selector) {
            self.protected.push(selector);
        }
    }

    pub fn is_protected(&self, env_id: &str) -> bool {
        self.protected
            .iter()
            .any(|s| matches!(s, MemorySelector::Env(e) if e == env_id))
    }

    /// Removes every entry matching `selector` and returns how many were
    /// removed. Idempotent.
    pub fn erase(&mut self, selector: &MemorySelector) -> usize {
        let Some(list) = self.entries.get_mut(selector.env_id()) else {
            return 0;
        };
        let before = list.len();
        match selector {
            MemorySelector::Env(_) => list.clear(),
            MemorySelector::States { cells, .. } => {
                list.retain(|e| !cells.contains(&e.state.position));
            }
            MemorySelector::Sequence { cells, .. } => loop {
                let hits = sequence_runs(list, cells);
                if hits.is_empty() {
                    break;
                }
                let mut i = 0;
                list.retain(|_| {
                    let keep = !hits.contains(&i);
                    i += 1;
                    keep
                });
            },
        }
        let removed = before - list.len();
        if list.is_empty() {
            self.entries.remove(selector.env_id());
        }
        removed
    }

    /// Entries that match `selector`, by linear scan.
    pub fn count_matching(&self, selector: &MemorySelector) -> usize {
        let list = self.entries(selector.env_id());
        match selector {
            MemorySelector::Env(_) => list.len(),
            MemorySelector::States { cells, .. } => list
                .iter()
                .filter(|e| cells.contains(&e.state.position))
                .count(),
            MemorySelector::Sequence { cells, .. } => sequence_runs(list, cells).len(),
        }
    }

    pub fn to_json(&self) -> String {
        let doc: BTreeMap<&str, Vec<EntryWire>> = self
            .entries
            .iter()
            .map(|(env, list)| {
                let wire = list
                    .iter()
                    .map(|e| EntryWire {
                        state: e.state.position,
                        collected: e.state.collected.iter().copied().collect(),
                        action: e.action,
                        reward: e.reward,
                    })
                    .collect();
                (env.as_str(), wire)
            })
            .collect();
        serde_json::to_string(&doc).expect("memory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        let doc: BTreeMap<String, Vec<EntryWire>> = serde_json::from_str(text)?;
        let entries = doc
            .into_iter()
            .map(|(env, list)| {
                let list = list
                    .into_iter()
                    .map(|w| MemoryEntry {
                        env_id: env.clone(),
                        state: AgentState {
                            position: w.state,
                            collected: w.collected.into_iter().collect(),
                        },
                        action: w.action,
                        reward: w.reward,
                    })
                    .collect();
                (env, list)
            })
            .collect();
        Ok(Self {
            entries,
            ..Self::default()
        })
    }

    /// Writes to `file_path`, if set.
    pub fn persist(&self) -> Result<(), MemoryError> {
        match &self.file_path {
            Some(path) => self.save(path),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        fs::write(path, self.to_json()).map_err(|source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut store = Self::from_json(&text)?;
        store.file_path = Some(path.to_path_buf());
        Ok(store)
    }
}

/// Removes matching entries from `memory`; see [`MemoryStore::erase`].
pub fn erase_memory(memory: &mut MemoryStore, selector: &MemorySelector) -> usize {
    memory.erase(selector)
}

/// Indices of entries that take part in a run realizing `cells`: entry
/// `j + k` sits on `cells[k]` and moves toward `cells[k + 1]`.
fn sequence_runs(list: &[MemoryEntry], cells: &[Coord]) -> BTreeSet<usize> {
    let mut hits = BTreeSet::new();
    let n = cells.len();
    if n < 2 {
        return hits;
    }
    let moves: Option<Vec<Action>> = cells
        .windows(2)
        .map(|w| Action::between(w[0], w[1]))
        .collect();
    let Some(moves) = moves else {
        return hits;
    };
    for j in 0..list.len().saturating_sub(n - 2) {
        let run = &list[j..j + n - 1];
        let realized = run
            .iter()
            .zip(cells.iter().zip(&moves))
            .all(|(e, (&c, &a))| e.state.position == c && e.action == a);
        if realized {
            hits.extend(j..j + n - 1);
        }
    }
    hits
}

//! An outside querier that probes an agent's behavior to decide whether some
//! content was forgotten, or to map an environment the agent should no
//! longer know.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::backend::PolicyBackend;
use crate::agent::constraints::ConstraintSet;
use crate::agent::memory::{MemoryEntry, MemoryStore};
use crate::agent::prompt::{assemble_prompt, task_text, MEMORY_WINDOW};
use crate::agent::runtime::{run_task, RuntimeError, Task};
use crate::agent::scripted::ScriptedBackend;
use crate::grid::{step, AgentState, CellKind, Coord, GridSpec};
use crate::plan::{realizes, EnvConstraints, Objective, Planner};
use crate::unlearning::engine::rollout_seed;
use crate::unlearning::Scenario;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack setup: {0}")]
    Setup(String),
    #[error("estimation: {0}")]
    Estimation(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub n_pairs: usize,
    pub trials_per_pair: usize,
    pub seed: u64,
    pub margin: f64,
    /// Step budget per probe task.
    pub budget: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_pairs: 10,
            trials_per_pair: 10,
            seed: 0,
            margin: 0.05,
            budget: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackTarget {
    States(BTreeSet<Coord>),
    Trajectory(Vec<Coord>),
}

impl fmt::Display for AttackTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |cells: &mut dyn Iterator<Item = &Coord>, sep: &str| {
            cells.map(|c| format!("({c})")).collect::<Vec<_>>().join(sep)
        };
        match self {
            AttackTarget::States(cells) => write!(f, "states {}", join(&mut cells.iter(), " ")),
            AttackTarget::Trajectory(cells) => write!(f, "route {}", join(&mut cells.iter(), "->")),
        }
    }
}

impl AttackTarget {
    fn hit(&self, positions: impl IntoIterator<Item = Coord>) -> bool {
        match self {
            AttackTarget::States(cells) => positions.into_iter().any(|p| cells.contains(&p)),
            AttackTarget::Trajectory(seq) => realizes(positions, seq),
        }
    }

    fn as_constraints(&self) -> EnvConstraints {
        match self {
            AttackTarget::States(cells) => EnvConstraints {
                forbidden: cells.clone(),
                ..Default::default()
            },
            AttackTarget::Trajectory(seq) => EnvConstraints {
                sequences: vec![seq.clone()],
                ..Default::default()
            },
        }
    }
}

/// One agent as seen by the adversary: a policy plus the memory and
/// constraints it runs with.
pub struct Agent<'a> {
    pub backend: &'a mut dyn PolicyBackend,
    pub memory: &'a MemoryStore,
    pub constraints: &'a ConstraintSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceVerdict {
    pub traversal_prob: f64,
    pub reference_prob: f64,
    pub distinguishable: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellClass {
    Obstacle,
    Free,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionResult {
    pub inferred: Vec<Vec<CellClass>>,
    pub success_rate: f64,
}

/// Never-seen counterpart of an unlearned agent: a scripted policy that
/// lacks the forgotten content from the start.
pub fn never_seen_agent(env_id: &str, scenario: &Scenario, seed: u64) -> ScriptedBackend {
    let mut gaps = ConstraintSet::new();
    match scenario {
        Scenario::States(cells) => cells.iter().for_each(|&c| gaps.forbid_state(env_id, c)),
        Scenario::Trajectory(cells) => gaps.forbid_sequence(env_id, cells.clone()),
        Scenario::Environment => gaps.degrade(env_id),
    }
    ScriptedBackend::with_gaps(seed, gaps)
}

/// Every `(start, goal)` pair whose shortest paths all touch the target.
/// For state targets, neither endpoint lies in the target.
pub fn candidate_pairs(spec: &GridSpec, target: &AttackTarget) -> Vec<(Coord, Coord)> {
    let free: Vec<Coord> = spec.free_cells().collect();
    let open = EnvConstraints::default();
    let plain = Planner::new(spec, &open);
    let blocked_cons = target.as_constraints();
    let blocked = Planner::new(spec, &blocked_cons);
    let excluded = |c: &Coord| matches!(target, AttackTarget::States(cells) if cells.contains(c));
    let mut out = Vec::new();
    for &s in free.iter().filter(|c| !excluded(c)) {
        let track = blocked.tracker().run([s]).0;
        let d_plain = plain.distances_from(s, &[]);
        let d_blocked = blocked.distances_from(s, &track);
        for &g in free.iter().filter(|c| !excluded(c)) {
            if s == g {
                continue;
            }
            let i = spec.index(g);
            let Some(d) = d_plain[i] else {
                continue;
            };
            if d_blocked[i].is_none_or(|db| db > d) {
                out.push((s, g));
            }
        }
    }
    out
}

/// `n` pairs drawn from [`candidate_pairs`], without repetition while enough
/// candidates exist.
pub fn attack_pairs(
    spec: &GridSpec,
    target: &AttackTarget,
    n: usize,
    seed: u64,
) -> Result<Vec<(Coord, Coord)>, AttackError> {
    if n == 0 {
        return Err(AttackError::Setup("n_pairs must be at least 1".into()));
    }
    let candidates = candidate_pairs(spec, target);
    if candidates.is_empty() {
        return Err(AttackError::Setup(format!(
            "no task in {} must pass through {target}",
            spec.env_id()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = n.min(candidates.len());
    let mut out: Vec<(Coord, Coord)> = index::sample(&mut rng, candidates.len(), take)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    while out.len() < n {
        out.push(candidates[rng.random_range(0..candidates.len())]);
    }
    Ok(out)
}

/// Fraction of rollouts over `pairs` that touch the target.
pub fn traversal_probability(
    spec: &GridSpec,
    agent: &mut Agent<'_>,
    target: &AttackTarget,
    pairs: &[(Coord, Coord)],
    config: &AttackConfig,
) -> Result<f64, AttackError> {
    if config.trials_per_pair == 0 || pairs.is_empty() {
        return Err(AttackError::Setup("need at least one pair and one trial".into()));
    }
    let mut scratch = agent.memory.clone();
    let mut hits = 0usize;
    for (p, &(s, g)) in pairs.iter().enumerate() {
        for trial in 0..config.trials_per_pair {
            agent.backend.reseed(rollout_seed(config.seed, 0, trial, p));
            let ep = run_task(
                spec,
                agent.backend,
                &mut scratch,
                agent.constraints,
                &Task::reach(s, g),
                config.budget,
            )?;
            if target.hit(ep.trajectory.positions()) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (pairs.len() * config.trials_per_pair) as f64)
}

/// Runs the same probing tasks on the agent under test and on a reference
/// agent and compares how often each touches the target.
pub fn inference_attack(
    target: &AttackTarget,
    spec: &GridSpec,
    agent: &mut Agent<'_>,
    reference: &mut Agent<'_>,
    config: &AttackConfig,
) -> Result<InferenceVerdict, AttackError> {
    if config.trials_per_pair == 0 {
        return Err(AttackError::Setup("trials_per_pair must be at least 1".into()));
    }
    let pairs = attack_pairs(spec, target, config.n_pairs, config.seed)?;
    let traversal_prob = traversal_probability(spec, agent, target, &pairs, config)?;
    let reference_prob = traversal_probability(spec, reference, target, &pairs, config)?;
    Ok(verdict(traversal_prob, reference_prob, config.margin))
}

pub fn verdict(traversal_prob: f64, reference_prob: f64, margin: f64) -> InferenceVerdict {
    InferenceVerdict {
        traversal_prob,
        reference_prob,
        distinguishable: (traversal_prob - reference_prob).abs() > margin,
        margin,
    }
}

fn quadrant(spec: &GridSpec, c: Coord) -> usize {
    let lower = usize::from(2 * c.0 >= spec.height());
    let right = usize::from(2 * c.1 >= spec.width());
    2 * lower + right
}

/// Probes every cell of the grid, one quadrant at a time, with a walk-to
/// task from the grid start, and maps the layout from what the agent does:
/// cells it stood on are free, cells it bumped into are obstacles, the rest
/// stay unknown. Each probe gets the Manhattan distance plus half the grid
/// perimeter in steps; all probes share `exploration_budget`.
pub fn reconstruct_environment(
    spec: &GridSpec,
    agent: &mut Agent<'_>,
    exploration_budget: usize,
    seed: u64,
) -> Result<ReconstructionResult, AttackError> {
    if exploration_budget < spec.area() {
        return Err(AttackError::Setup(format!(
            "exploration budget {exploration_budget} is below the grid area {}",
            spec.area()
        )));
    }
    let mut probes: Vec<Coord> = spec.coords().filter(|&c| c != spec.start()).collect();
    probes.sort_by_key(|&c| (quadrant(spec, c), c));

    let mut visited: BTreeSet<Coord> = BTreeSet::from([spec.start()]);
    let mut bumped: BTreeSet<Coord> = BTreeSet::new();
    let mut scratch = agent.memory.clone();
    let mut remaining = exploration_budget;
    let slack = (spec.width() + spec.height()) / 2;
    for (i, &goal) in probes.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        agent.backend.reseed(rollout_seed(seed, 1, 0, i));
        let cap = (spec.start().manhattan(goal) + slack).min(remaining);
        let text = task_text(&Objective::Reach(goal));
        let mut state = AgentState::at(spec.start());
        let mut trail = vec![state.position];
        for _ in 0..cap {
            let prompt = assemble_prompt(
                &text,
                spec,
                &state,
                &trail,
                &scratch,
                agent.constraints,
                MEMORY_WINDOW,
            );
            let action = agent
                .backend
                .decide(&prompt, spec)
                .map_err(RuntimeError::from)?;
            let outcome = step(spec, &state, action).map_err(RuntimeError::from)?;
            remaining -= 1;
            scratch.record(MemoryEntry {
                env_id: spec.env_id().to_string(),
                state: state.clone(),
                action,
                reward: outcome.reward,
            });
            let next = outcome.next_state;
            let intended = action.offset(state.position, spec.height(), spec.width());
            let blocked_at = intended.filter(|_| next.position == state.position);
            visited.insert(next.position);
            if let Some(b) = blocked_at {
                bumped.insert(b);
            }
            state = next;
            trail.push(state.position);
            if state.position == goal || blocked_at == Some(goal) {
                break;
            }
        }
    }

    let mut inferred = vec![vec![CellClass::Unknown; spec.width()]; spec.height()];
    let mut correct = 0usize;
    for c in spec.coords() {
        let class = if visited.contains(&c) {
            CellClass::Free
        } else if bumped.contains(&c) {
            CellClass::Obstacle
        } else {
            CellClass::Unknown
        };
        inferred[c.0][c.1] = class;
        let truth_obstacle = spec.cell(c) == CellKind::Obstacle;
        correct += usize::from(match class {
            CellClass::Free => !truth_obstacle,
            CellClass::Obstacle => truth_obstacle,
            CellClass::Unknown => false,
        });
    }
    Ok(ReconstructionResult {
        inferred,
        success_rate: correct as f64 / spec.area() as f64,
    })
}

pub type ActionCounts = BTreeMap<AgentState, [u32; 4]>;

fn action_counts(
    spec: &GridSpec,
    agent: &mut Agent<'_>,
    tasks: &[Task],
    trials: usize,
    budget: usize,
    seed: u64,
) -> Result<ActionCounts, AttackError> {
    let mut counts = ActionCounts::new();
    let mut scratch = agent.memory.clone();
    for (t, task) in tasks.iter().enumerate() {
        for trial in 0..trials {
            agent.backend.reseed(rollout_seed(seed, 2, trial, t));
            let ep = run_task(spec, agent.backend, &mut scratch, agent.constraints, task, budget)?;
            for (state, action) in ep.trajectory.pairs {
                counts.entry(state).or_insert([0; 4])[action.index()] += 1;
            }
        }
    }
    Ok(counts)
}

fn smoothed(counts: &[u32; 4]) -> [f64; 4] {
    let total: f64 = counts.iter().map(|&c| f64::from(c) + 1.0).sum();
    counts.map(|c| (f64::from(c) + 1.0) / total)
}

/// Mean KL divergence between Laplace-smoothed per-state action
/// distributions of two agents, over states both agents visited.
pub fn behavior_kl(
    spec: &GridSpec,
    unlearned: &mut Agent<'_>,
    reference: &mut Agent<'_>,
    tasks: &[Task],
    trials: usize,
    budget: usize,
    seed: u64,
) -> Result<f64, AttackError> {
    let a = action_counts(spec, unlearned, tasks, trials, budget, seed)?;
    let b = action_counts(spec, reference, tasks, trials, budget, seed)?;
    kl_from_counts(&a, &b)
}

/// KL estimate from per-state action counts.
pub fn kl_from_counts(a: &ActionCounts, b: &ActionCounts) -> Result<f64, AttackError> {
    let shared: Vec<f64> = a
        .iter()
        .filter_map(|(s, ca)| b.get(s).map(|cb| (ca, cb)))
        .map(|(ca, cb)| {
            let (p, q) = (smoothed(ca), smoothed(cb));
            p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>()
        })
        .collect();
    if shared.is_empty() {
        return Err(AttackError::Estimation("the agents share no visited state".into()));
    }
    Ok(shared.iter().sum::<f64>() / shared.len() as f64)
}

/// Behavioral bound `L_lip * eps_reward`.
pub fn kl_bound(l_lip: f64, eps_reward: f64) -> f64 {
    l_lip * eps_reward
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub target: String,
    pub traversal_prob: f64,
    pub reference_prob: f64,
    pub distinguishable: bool,
    pub reconstruction_success_rate: Option<f64>,
    pub kl_estimate: Option<f64>,
    pub kl_bound: Option<f64>,
}


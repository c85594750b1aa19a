use thiserror::Error;

use crate::agent::backend::{BackendError, PolicyBackend};
use crate::agent::constraints::ConstraintSet;
use crate::agent::memory::{MemoryEntry, MemoryStore};
use crate::agent::prompt::{assemble_prompt, task_text, MEMORY_WINDOW};
use crate::grid::{step, AgentState, Coord, GridError, GridSpec, Trajectory};
use crate::plan::Objective;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("episode budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl RuntimeError {
    pub fn is_transport(&self) -> bool {
        matches!(self, RuntimeError::Backend(e) if e.is_transport())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub steps: usize,
    pub success: bool,
    pub total_reward: f64,
}

/// A start cell plus what counts as finishing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub start: Coord,
    pub objective: Objective,
}

impl Task {
    /// Collect every treasure from the grid's own start.
    pub fn collect_all(spec: &GridSpec) -> Self {
        Self {
            start: spec.start(),
            objective: Objective::CollectAll,
        }
    }

    pub fn reach(start: Coord, goal: Coord) -> Self {
        Self {
            start,
            objective: Objective::Reach(goal),
        }
    }
}

/// Runs one episode: prompt, decide, step, record, until the objective is met
/// or `budget` steps are spent.
pub fn run_task(
    spec: &GridSpec,
    backend: &mut dyn PolicyBackend,
    memory: &mut MemoryStore,
    constraints: &ConstraintSet,
    task: &Task,
    budget: usize,
) -> Result<EpisodeResult, RuntimeError> {
    if budget == 0 {
        return Err(RuntimeError::ZeroBudget);
    }
    let mut state = AgentState::at(task.start);
    spec.check_state(&state)?;
    let text = task_text(&task.objective);
    let mut trajectory = Trajectory::starting_at(state.clone());
    let mut trail = vec![task.start];
    let mut total_reward = 0.0;
    let mut success = task.objective.is_done(spec, &state);
    while !success && trajectory.len() < budget {
        let prompt = assemble_prompt(
            &text,
            spec,
            &state,
            &trail,
            memory,
            constraints,
            MEMORY_WINDOW,
        );
        let action = backend.decide(&prompt, spec)?;
        let outcome = step(spec, &state, action)?;
        memory.record(MemoryEntry {
            env_id: spec.env_id().to_string(),
            state: state.clone(),
            action,
            reward: outcome.reward,
        });
        total_reward += outcome.reward;
        trajectory.pairs.push((state, action));
        state = outcome.next_state;
        trail.push(state.position);
        success = task.objective.is_done(spec, &state);
    }
    trajectory.last = state;
    Ok(EpisodeResult {
        steps: trajectory.len(),
        trajectory,
        success,
        total_reward,
    })
}

/// The canonical episode: collect every treasure from the grid start.
pub fn run_episode(
    spec: &GridSpec,
    backend: &mut dyn PolicyBackend,
    memory: &mut MemoryStore,
    constraints: &ConstraintSet,
    budget: usize,
) -> Result<EpisodeResult, RuntimeError> {
    run_task(
        spec,
        backend,
        memory,
        constraints,
        &Task::collect_all(spec),
        budget,
    )
}

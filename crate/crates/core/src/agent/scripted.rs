//! Deterministic stand-in for the language model.
//!
//! The scripted policy reads everything it acts on from the prompt: its
//! position and trail from the state rendering, the objective from the task
//! text, and its constraints from the directive block. It then follows the
//! constrained planner, or walks uniformly at random in an environment it has
//! been told to forget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::backend::{BackendError, BackendKind, PolicyBackend};
use crate::agent::constraints::ConstraintSet;
use crate::agent::prompt::{parse_state, parse_task, PromptContext};
use crate::grid::{Action, GridSpec};
use crate::plan::{EnvConstraints, Planner};
use crate::unlearning::directives::parse_directives;

/// Seed-driven uniform choice over the admissible actions.
pub fn random_action(rng: &mut ChaCha8Rng, admissible: &[Action]) -> Option<Action> {
    if admissible.is_empty() {
        None
    } else {
        Some(admissible[rng.random_range(0..admissible.len())])
    }
}

/// Decides one action from a prompt. `extra` adds constraints the prompt does
/// not state (used for agents that never learned some content).
pub fn scripted_decide(
    prompt: &PromptContext,
    spec: &GridSpec,
    rng: &mut ChaCha8Rng,
    extra: &EnvConstraints,
) -> Result<Action, BackendError> {
    let obs = parse_state(&prompt.state_rendering).map_err(|e| BackendError::Prompt(e.0))?;
    let objective = parse_task(&prompt.task_text).map_err(|e| BackendError::Prompt(e.0))?;
    let directives =
        parse_directives(&prompt.directives).map_err(|e| BackendError::Prompt(e.to_string()))?;
    let mut cons = directives.for_env(&obs.env_id);
    cons.forbidden.extend(extra.forbidden.iter().copied());
    for s in &extra.sequences {
        if !cons.sequences.contains(s) {
            cons.sequences.push(s.clone());
        }
    }
    cons.degraded |= extra.degraded;
    spec.check_state(&obs.state)
        .map_err(|e| BackendError::Prompt(e.to_string()))?;

    let planner = Planner::new(spec, &cons);
    if cons.degraded {
        let track = planner.tracker().run(obs.trail.iter().copied()).0;
        let admissible: Vec<Action> = Action::ALL
            .into_iter()
            .filter(|&a| planner.admissible(obs.state.position, &track, a))
            .collect();
        return random_action(rng, &admissible).ok_or(BackendError::NoAdmissibleAction);
    }
    planner
        .choose(&obs.state, &obs.trail, &objective)
        .ok_or(BackendError::NoAdmissibleAction)
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    seed: u64,
    rng: ChaCha8Rng,
    gaps: ConstraintSet,
}

impl ScriptedBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gaps: ConstraintSet::new(),
        }
    }

    /// An agent that never acquired the content described by `gaps`: it acts
    /// as if those constraints were always part of its prompt.
    pub fn with_gaps(seed: u64, gaps: ConstraintSet) -> Self {
        Self {
            gaps,
            ..Self::new(seed)
        }
    }

    pub fn gaps(&self) -> &ConstraintSet {
        &self.gaps
    }
}

impl PolicyBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn identity(&self) -> String {
        format!("scripted(seed={})", self.seed)
    }

    fn decide(&mut self, prompt: &PromptContext, spec: &GridSpec) -> Result<Action, BackendError> {
        let extra = self.gaps.for_env(spec.env_id());
        scripted_decide(prompt, spec, &mut self.rng, &extra)
    }

    fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

//! Prompt assembly and the parsers the scripted policy uses to read it back.

use std::fmt::Write as _;

use thiserror::Error;

use crate::agent::constraints::ConstraintSet;
use crate::agent::memory::MemoryStore;
use crate::grid::{AgentState, Coord, GridSpec};
use crate::plan::Objective;
use crate::unlearning::directives::render_directives;

/// Default number of memory entries included in a prompt.
pub const MEMORY_WINDOW: usize = 50;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("prompt: {0}")]
pub struct PromptError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptContext {
    pub task_text: String,
    pub state_rendering: String,
    pub memory_excerpt: String,
    pub directives: String,
}

impl PromptContext {
    /// Single-message form sent to a remote model.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "You control an agent in a grid world.").unwrap();
        writeln!(out, "\n[Task]\n{}", self.task_text.trim_end()).unwrap();
        writeln!(out, "\n[State]\n{}", self.state_rendering.trim_end()).unwrap();
        if !self.memory_excerpt.is_empty() {
            writeln!(out, "\n[Memory: state | collected | action | reward]").unwrap();
            write!(out, "{}", self.memory_excerpt).unwrap();
        }
        if !self.directives.is_empty() {
            writeln!(out, "\n[Constraints: obey every line]").unwrap();
            write!(out, "{}", self.directives).unwrap();
        }
        writeln!(
            out,
            "\nCoordinates are row,col. U decreases the row, L decreases the column.\n\
             Reply with exactly one letter: U, D, L or R."
        )
        .unwrap();
        out
    }
}

/// Task description for an objective. Reach tasks carry a `GOAL r,c` line.
pub fn task_text(objective: &Objective) -> String {
    match objective {
        Objective::CollectAll => "Collect every treasure in the grid.\n".to_string(),
        Objective::Reach(g) => format!("Walk to cell {g}.\nGOAL {g}\n"),
    }
}

pub fn parse_task(text: &str) -> Result<Objective, PromptError> {
    for line in text.lines() {
        if let Some(rest) = line.trim().strip_prefix("GOAL ") {
            return parse_coord(rest)
                .map(Objective::Reach)
                .ok_or_else(|| PromptError(format!("bad goal line {line:?}")));
        }
    }
    Ok(Objective::CollectAll)
}

fn coord_list(cells: impl IntoIterator<Item = Coord>) -> String {
    let parts: Vec<String> = cells.into_iter().map(|c| c.to_string()).collect();
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join(" ")
    }
}

fn parse_coord(text: &str) -> Option<Coord> {
    let (r, c) = text.trim().split_once(',')?;
    Some(Coord(r.trim().parse().ok()?, c.trim().parse().ok()?))
}

fn parse_list(text: &str) -> Option<Vec<Coord>> {
    let text = text.trim();
    if text == "none" {
        return Some(Vec::new());
    }
    text.split_whitespace().map(parse_coord).collect()
}

/// What the state rendering says.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub env_id: String,
    pub state: AgentState,
    pub trail: Vec<Coord>,
}

pub fn render_state(spec: &GridSpec, state: &AgentState, trail: &[Coord]) -> String {
    let mut out = String::new();
    writeln!(out, "env: {}", spec.env_id()).unwrap();
    writeln!(out, "position: {}", state.position).unwrap();
    writeln!(out, "collected: {}", coord_list(state.collected.iter().copied())).unwrap();
    writeln!(out, "trail: {}", coord_list(trail.iter().copied())).unwrap();
    writeln!(out, "map:").unwrap();
    out.push_str(&spec.to_text());
    out
}

pub fn parse_state(rendering: &str) -> Result<Observation, PromptError> {
    let mut env_id = None;
    let mut position = None;
    let mut collected = None;
    let mut trail = None;
    for line in rendering.lines() {
        let Some((key, value)) = line.split_once(": ") else {
            continue;
        };
        match key {
            "env" => env_id = Some(value.trim().to_string()),
            "position" => position = parse_coord(value),
            "collected" => collected = parse_list(value),
            "trail" => trail = parse_list(value),
            _ => {}
        }
    }
    let missing = |what: &str| PromptError(format!("state rendering lacks a valid {what} line"));
    let position = position.ok_or_else(|| missing("position"))?;
    Ok(Observation {
        env_id: env_id.ok_or_else(|| missing("env"))?,
        state: AgentState {
            position,
            collected: collected.ok_or_else(|| missing("collected"))?.into_iter().collect(),
        },
        trail: trail.unwrap_or_else(|| vec![position]),
    })
}

/// Builds the agent-side prompt. Deterministic in its inputs; includes the
/// last `window` memory entries of this environment and its directives.
pub fn assemble_prompt(
    task: &str,
    spec: &GridSpec,
    state: &AgentState,
    trail: &[Coord],
    memory: &MemoryStore,
    constraints: &ConstraintSet,
    window: usize,
) -> PromptContext {
    let env_id = spec.env_id();
    let mut excerpt = String::new();
    for e in memory.recent(env_id, window) {
        writeln!(
            excerpt,
            "{} | {} | {} | {}",
            e.state.position,
            coord_list(e.state.collected.iter().copied()),
            e.action,
            e.reward
        )
        .unwrap();
    }
    PromptContext {
        task_text: task.to_string(),
        state_rendering: render_state(spec, state, trail),
        memory_excerpt: excerpt,
        directives: render_directives(env_id, &constraints.for_env(env_id)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::generate;

    #[test]
    fn state_round_trip() {
        let spec = generate(5, 6, 6, 4, 2).unwrap();
        let mut state = spec.initial_state();
        state.collected.insert(spec.treasures().next().unwrap());
        let trail = vec![spec.start(), spec.start()];
        let obs = parse_state(&render_state(&spec, &state, &trail)).unwrap();
        assert_eq!(obs.state, state);
        assert_eq!(obs.trail, trail);
        assert_eq!(obs.env_id, spec.env_id());
    }

    #[test]
    fn task_round_trip() {
        for o in [Objective::CollectAll, Objective::Reach(Coord(3, 1))] {
            assert_eq!(parse_task(&task_text(&o)).unwrap(), o);
        }
    }
}

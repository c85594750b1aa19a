//! Unlearning requests, prompt templates, execution and verification for the
//! three scenarios: forgetting states, forgetting an ordered route, and
//! forgetting a whole environment.

pub mod directives;
pub mod engine;
pub mod templates;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::memory::MemorySelector;
use crate::agent::runtime::RuntimeError;
use crate::grid::Coord;

pub use directives::{parse_directives, DirectiveError, Directives};
pub use engine::{
    execute_unlearning, verify, EvalEnv, SequenceMode, VerificationReport, VerifyContext,
    VerifyOptions,
};
pub use templates::{template_bank, Template, TemplateBank, PROMPT_MARKER};

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error("invalid request: {0}")]
    Request(String),
    #[error("prompt does not match the request: {0}")]
    Consistency(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Directive(#[from] DirectiveError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// What is to be forgotten.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Scenario {
    States(BTreeSet<Coord>),
    Trajectory(Vec<Coord>),
    Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    State,
    Trajectory,
    Environment,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::State,
        ScenarioKind::Trajectory,
        ScenarioKind::Environment,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::State => "state",
            ScenarioKind::Trajectory => "trajectory",
            ScenarioKind::Environment => "environment",
        })
    }
}

impl Scenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Scenario::States(_) => ScenarioKind::State,
            Scenario::Trajectory(_) => ScenarioKind::Trajectory,
            Scenario::Environment => ScenarioKind::Environment,
        }
    }
}

/// Prompt family. The families share directive payloads and differ in
/// surrounding text and in how reliably the directives survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "nl")]
    NaturalLanguage,
    #[serde(rename = "code")]
    Code,
    #[serde(rename = "example")]
    Example,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NaturalLanguage, Strategy::Code, Strategy::Example];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::NaturalLanguage => "nl",
            Strategy::Code => "code",
            Strategy::Example => "example",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UnlearnRequest {
    pub scenario: Scenario,
    pub request_text: String,
    pub env_id: String,
}

fn join_cells(cells: impl IntoIterator<Item = Coord>, sep: &str) -> String {
    cells
        .into_iter()
        .map(|c| format!("({c})"))
        .collect::<Vec<_>>()
        .join(sep)
}

impl UnlearnRequest {
    pub fn states(
        env_id: impl Into<String>,
        cells: impl IntoIterator<Item = Coord>,
    ) -> Result<Self, UnlearnError> {
        let env_id = env_id.into();
        let cells: BTreeSet<Coord> = cells.into_iter().collect();
        if cells.is_empty() {
            return Err(UnlearnError::Request("no states to forget".into()));
        }
        let request_text = format!(
            "In {env_id}, forget the location{} {} and never step there again.",
            if cells.len() > 1 { "s" } else { "" },
            join_cells(cells.iter().copied(), ", ")
        );
        Self::build(Scenario::States(cells), request_text, env_id)
    }

    pub fn trajectory(env_id: impl Into<String>, cells: Vec<Coord>) -> Result<Self, UnlearnError> {
        let env_id = env_id.into();
        if cells.len() < 2 {
            return Err(UnlearnError::Request("a route needs at least two cells".into()));
        }
        if cells.windows(2).any(|w| w[0] == w[1]) {
            return Err(UnlearnError::Request("a route cannot repeat a cell in place".into()));
        }
        let request_text = format!(
            "In {env_id}, forget the route {}; the individual cells stay available.",
            join_cells(cells.iter().copied(), " -> ")
        );
        Self::build(Scenario::Trajectory(cells), request_text, env_id)
    }

    pub fn environment(env_id: impl Into<String>) -> Result<Self, UnlearnError> {
        let env_id = env_id.into();
        let request_text = format!("Forget everything you learned about {env_id}.");
        Self::build(Scenario::Environment, request_text, env_id)
    }

    fn build(scenario: Scenario, request_text: String, env_id: String) -> Result<Self, UnlearnError> {
        if env_id.is_empty() || env_id.contains(char::is_whitespace) {
            return Err(UnlearnError::Request(format!("bad environment id {env_id:?}")));
        }
        Ok(Self {
            scenario,
            request_text,
            env_id,
        })
    }

    pub fn kind(&self) -> ScenarioKind {
        self.scenario.kind()
    }

    /// Memory erased when this request is executed.
    pub fn selector(&self) -> MemorySelector {
        match &self.scenario {
            Scenario::States(cells) => MemorySelector::States {
                env_id: self.env_id.clone(),
                cells: cells.clone(),
            },
            Scenario::Trajectory(cells) => MemorySelector::Sequence {
                env_id: self.env_id.clone(),
                cells: cells.clone(),
            },
            Scenario::Environment => MemorySelector::Env(self.env_id.clone()),
        }
    }

    /// Checks that parsed directives fit this request: at least one directive
    /// of the request's kind, none of another kind, and nothing outside the
    /// requested target.
    pub fn check_consistent(&self, parsed: &Directives) -> Result<(), UnlearnError> {
        let fail = |msg: String| Err(UnlearnError::Consistency(msg));
        let (states, seqs, envs) = (
            !parsed.avoid_states.is_empty(),
            !parsed.sequences.is_empty(),
            !parsed.forget_envs.is_empty(),
        );
        match &self.scenario {
            Scenario::States(cells) => {
                if !states || seqs || envs {
                    return fail("state request needs only AVOID-STATE directives".into());
                }
                if let Some(c) = parsed.avoid_states.iter().find(|c| !cells.contains(c)) {
                    return fail(format!("AVOID-STATE {c} is not part of the request"));
                }
            }
            Scenario::Trajectory(cells) => {
                if !seqs || states || envs {
                    return fail("route request needs only FORBID-SEQUENCE directives".into());
                }
                if parsed.sequences.iter().any(|s| s != cells) {
                    return fail("FORBID-SEQUENCE differs from the requested route".into());
                }
            }
            Scenario::Environment => {
                if !envs || states || seqs {
                    return fail("environment request needs only FORGET-ENV".into());
                }
                if parsed.forget_envs.iter().any(|e| *e != self.env_id) {
                    return fail("FORGET-ENV names another environment".into());
                }
            }
        }
        Ok(())
    }
}

/// A rendered unlearning prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlearnPrompt {
    pub prompt_text: String,
    pub parsed: Directives,
    pub strategy: Strategy,
    pub template_id: usize,
}

impl UnlearnPrompt {
    /// Parses a prompt produced elsewhere (for example by a remote model).
    pub fn from_text(
        text: impl Into<String>,
        strategy: Strategy,
        template_id: usize,
    ) -> Result<Self, UnlearnError> {
        let prompt_text = text.into();
        if !prompt_text.starts_with(PROMPT_MARKER) {
            return Err(UnlearnError::Consistency(format!(
                "prompt must start with {PROMPT_MARKER:?}"
            )));
        }
        let parsed = parse_directives(&prompt_text)?;
        Ok(Self {
            prompt_text,
            parsed,
            strategy,
            template_id,
        })
    }
}

//! Line-oriented directive grammar carried inside unlearning prompts.
//!
//! ```text
//! AVOID-STATE r,c
//! FORBID-SEQUENCE (r,c)->(r,c)[->(r,c)...]
//! FORGET-ENV <env-id>
//! ```
//!
//! Any other line is ignored, so directives can sit inside free-form prose.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::grid::Coord;
use crate::plan::EnvConstraints;

pub const AVOID_STATE: &str = "AVOID-STATE";
pub const FORBID_SEQUENCE: &str = "FORBID-SEQUENCE";
pub const FORGET_ENV: &str = "FORGET-ENV";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("directive on line {line}: {msg}")]
pub struct DirectiveError {
    pub line: usize,
    pub msg: String,
}

/// Constraint delta parsed from a prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Directives {
    pub avoid_states: BTreeSet<Coord>,
    pub sequences: Vec<Vec<Coord>>,
    pub forget_envs: BTreeSet<String>,
}

impl Directives {
    pub fn is_empty(&self) -> bool {
        self.avoid_states.is_empty() && self.sequences.is_empty() && self.forget_envs.is_empty()
    }

    /// Constraints for `env_id` implied by these directives alone.
    pub fn for_env(&self, env_id: &str) -> EnvConstraints {
        EnvConstraints {
            forbidden: self.avoid_states.clone(),
            sequences: self.sequences.clone(),
            degraded: self.forget_envs.contains(env_id),
        }
    }
}

pub fn avoid_state_line(c: Coord) -> String {
    format!("{AVOID_STATE} {},{}", c.0, c.1)
}

pub fn forbid_sequence_line(seq: &[Coord]) -> String {
    let body: Vec<String> = seq.iter().map(|c| format!("({},{})", c.0, c.1)).collect();
    format!("{FORBID_SEQUENCE} {}", body.join("->"))
}

pub fn forget_env_line(env_id: &str) -> String {
    format!("{FORGET_ENV} {env_id}")
}

/// Serializes constraints for one environment, one directive per line.
pub fn render_directives(env_id: &str, constraints: &EnvConstraints) -> String {
    let mut out = String::new();
    for &c in &constraints.forbidden {
        writeln!(out, "{}", avoid_state_line(c)).unwrap();
    }
    for seq in &constraints.sequences {
        writeln!(out, "{}", forbid_sequence_line(seq)).unwrap();
    }
    if constraints.degraded {
        writeln!(out, "{}", forget_env_line(env_id)).unwrap();
    }
    out
}

fn parse_coord(text: &str) -> Option<Coord> {
    let (r, c) = text.trim().split_once(',')?;
    Some(Coord(r.trim().parse().ok()?, c.trim().parse().ok()?))
}

/// Total parser: unknown lines are skipped, malformed directives are errors.
pub fn parse_directives(text: &str) -> Result<Directives, DirectiveError> {
    let mut out = Directives::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |msg: &str| DirectiveError {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (keyword, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match keyword {
            AVOID_STATE => {
                let c = parse_coord(rest).ok_or_else(|| err("expected `r,c`"))?;
                out.avoid_states.insert(c);
            }
            FORBID_SEQUENCE => {
                let cells = rest
                    .split("->")
                    .map(|p| {
                        p.trim()
                            .strip_prefix('(')
                            .and_then(|p| p.strip_suffix(')'))
                            .and_then(parse_coord)
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| err("expected `(r,c)->(r,c)...`"))?;
                if cells.len() < 2 {
                    return Err(err("a sequence needs at least two cells"));
                }
                if !out.sequences.contains(&cells) {
                    out.sequences.push(cells);
                }
            }
            FORGET_ENV => {
                if rest.is_empty() || rest.contains(char::is_whitespace) {
                    return Err(err("expected a single environment id"));
                }
                out.forget_envs.insert(rest.to_string());
            }
            _ => {}
        }
    }
    Ok(out)
}

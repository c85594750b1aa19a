//! Template banks that turn an unlearning request into prompt text.
//!
//! Each bank holds eight templates for one (scenario, strategy) pair. A
//! template may drop directives: directive `i` of a request is omitted when a
//! uniform draw keyed by `(noise_seed, request_text, i)` falls below the
//! template's omission probability. The draw does not depend on the
//! template, so for a fixed request every template with a lower omission
//! probability keeps a superset of the directives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::unlearning::directives::{avoid_state_line, forbid_sequence_line, forget_env_line, parse_directives};
use crate::unlearning::{Scenario, ScenarioKind, Strategy, UnlearnPrompt, UnlearnRequest};

/// Every unlearning prompt opens with this marker.
pub const PROMPT_MARKER: &str = "Unlearning Instruction:";

pub const BANK_SIZE: usize = 8;

const NL_OMISSION: [f64; BANK_SIZE] = [0.0; BANK_SIZE];
const CODE_OMISSION: [f64; BANK_SIZE] = [0.0, 0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.1];
const EXAMPLE_OMISSION: [f64; BANK_SIZE] = [0.1, 0.12, 0.15, 0.18, 0.2, 0.25, 0.3, 0.3];

const NL_PROSE: [&str; BANK_SIZE] = [
    "Treat the content listed below as something the agent never learned.",
    "Every directive below stays in force for all later episodes.",
    "Do not try to rediscover the forgotten content by exploring.",
    "Everything not listed should be handled exactly as before.",
    "If the preferred move breaks a directive, take the next best direction instead.",
    "Memory records about the forgotten content no longer exist and must not be rebuilt.",
    "All directives apply together; none overrides another.",
    "These lines outrank habits formed before this instruction.",
];

const CODE_PROSE: [&str; BANK_SIZE] = [
    "# each rule is checked before an action is emitted",
    "# for a in ['U', 'D', 'L', 'R']: skip a if it breaks a rule",
    "# rules persist across episodes until revoked",
    "# actions unrelated to the rules are unchanged",
    "# a rule violation is never an acceptable fallback",
    "# memory rows touching a rule were deleted",
    "# rules are conjunctive",
    "# rule block follows",
];

const EXAMPLE_PROSE: [&str; BANK_SIZE] = [
    "Example: told to avoid cell 4,4, an agent at 4,3 heading right goes around through row 5.",
    "Example: told to forget a route, an agent may still stand on any single cell of it.",
    "Example: told to forget a grid, an agent explores it like a stranger.",
    "Example: unrelated goals are pursued along the usual shortest paths.",
    "Example: a constraint without a detour leaves the goal unfinished, not broken.",
    "Example: memory about forgotten content is gone and stays gone.",
    "Example: two constraints mean both are obeyed.",
    "Example: follow the same pattern for the lines below.",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: usize,
    pub kind: ScenarioKind,
    pub strategy: Strategy,
    /// Per-directive omission probability.
    pub omission: f64,
    title: &'static str,
    prose: &'static [&'static str],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub kind: ScenarioKind,
    pub strategy: Strategy,
    pub templates: Vec<Template>,
}

impl TemplateBank {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Template> {
        self.templates.get(id)
    }
}

fn title(kind: ScenarioKind, strategy: Strategy) -> &'static str {
    match (strategy, kind) {
        (Strategy::NaturalLanguage, ScenarioKind::State) => {
            "remove the cells below from the agent's picture of the world."
        }
        (Strategy::NaturalLanguage, ScenarioKind::Trajectory) => {
            "drop the route below from the agent's habits while keeping its cells usable."
        }
        (Strategy::NaturalLanguage, ScenarioKind::Environment) => {
            "discard all knowledge of the environment below."
        }
        (Strategy::Code, _) => "apply the rule block below.",
        (Strategy::Example, _) => "follow the pattern shown.",
    }
}

/// The eight templates for one scenario and strategy, best first.
pub fn template_bank(kind: ScenarioKind, strategy: Strategy) -> TemplateBank {
    let (omission, prose): (&[f64; BANK_SIZE], &'static [&'static str; BANK_SIZE]) = match strategy {
        Strategy::NaturalLanguage => (&NL_OMISSION, &NL_PROSE),
        Strategy::Code => (&CODE_OMISSION, &CODE_PROSE),
        Strategy::Example => (&EXAMPLE_OMISSION, &EXAMPLE_PROSE),
    };
    let templates = (0..BANK_SIZE)
        .map(|id| Template {
            id,
            kind,
            strategy,
            omission: omission[id],
            title: title(kind, strategy),
            prose: &prose[..BANK_SIZE - id],
        })
        .collect();
    TemplateBank {
        kind,
        strategy,
        templates,
    }
}

/// Uniform number in `[0, 1)` keyed by seed, request and directive index.
pub fn omission_draw(noise_seed: u64, request_text: &str, index: usize) -> f64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let bytes = noise_seed
        .to_le_bytes()
        .into_iter()
        .chain(request_text.bytes())
        .chain((index as u64).to_le_bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    ChaCha8Rng::seed_from_u64(h).random::<f64>()
}

/// Directive lines a request calls for, in a fixed order.
pub fn directive_lines(request: &UnlearnRequest) -> Vec<String> {
    match &request.scenario {
        Scenario::States(cells) => cells.iter().map(|&c| avoid_state_line(c)).collect(),
        Scenario::Trajectory(cells) => vec![forbid_sequence_line(cells)],
        Scenario::Environment => vec![forget_env_line(&request.env_id)],
    }
}

impl Template {
    pub fn completeness(&self) -> f64 {
        1.0 - self.omission
    }

    /// Text with every directive present; used for length features.
    pub fn full_text(&self, request: &UnlearnRequest) -> String {
        self.compose(&directive_lines(request))
    }

    fn compose(&self, directives: &[String]) -> String {
        let mut out = format!("{PROMPT_MARKER} {}\n", self.title);
        for line in self.prose {
            out.push_str(line);
            out.push('\n');
        }
        for line in directives {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    /// Renders the prompt for `request`, dropping directives per the
    /// omission rule.
    pub fn render(&self, request: &UnlearnRequest, noise_seed: u64) -> UnlearnPrompt {
        let kept: Vec<String> = directive_lines(request)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| omission_draw(noise_seed, &request.request_text, *i) >= self.omission)
            .map(|(_, l)| l)
            .collect();
        let prompt_text = self.compose(&kept);
        let parsed = parse_directives(&prompt_text).expect("templates emit well-formed directives");
        UnlearnPrompt {
            prompt_text,
            parsed,
            strategy: self.strategy,
            template_id: self.id,
        }
    }
}

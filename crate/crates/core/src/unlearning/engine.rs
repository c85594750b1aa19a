//! Executing an unlearning prompt and checking that it worked.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::backend::PolicyBackend;
use crate::agent::constraints::ConstraintSet;
use crate::agent::memory::MemoryStore;
use crate::agent::runtime::{run_task, EpisodeResult, Task};
use crate::grid::{Coord, GridSpec};
use crate::plan::{realizes, solvable, EnvConstraints};
use crate::unlearning::{Scenario, ScenarioKind, UnlearnError, UnlearnPrompt, UnlearnRequest};

/// How a forbidden route counts as realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceMode {
    /// The whole route, entered cell after cell.
    #[default]
    FullSequence,
    /// Any single step of the route.
    PerEdge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub trials: usize,
    /// Step budget per evaluation episode.
    pub budget: usize,
    /// Allowed drop in success rate on unaffected tasks.
    pub success_tolerance: f64,
    /// Relative band for step means in untouched environments.
    pub step_band: f64,
    pub sequence_mode: SequenceMode,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 10,
            budget: 200,
            success_tolerance: 0.0,
            step_band: 0.05,
            sequence_mode: SequenceMode::FullSequence,
            seed: 0,
        }
    }
}

/// An environment plus the `(start, goal)` tasks used to probe it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEnv {
    pub spec: GridSpec,
    pub tasks: Vec<(Coord, Coord)>,
}

impl EvalEnv {
    pub fn new(spec: GridSpec, tasks: Vec<(Coord, Coord)>) -> Self {
        Self { spec, tasks }
    }

    /// The collect-all task followed by the pair tasks.
    pub fn all_tasks(&self) -> Vec<Task> {
        std::iter::once(Task::collect_all(&self.spec))
            .chain(self.tasks.iter().map(|&(s, g)| Task::reach(s, g)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub scenario: ScenarioKind,
    pub objective_met: bool,
    pub preservation_met: bool,
    pub memory_erased: bool,
    /// Pass/fail per named check: `eq2`/`eq3` for states, `eq5`/`eq6` for routes, `eq8`/`eq9` for environments.
    #[serde(flatten)]
    pub checks: BTreeMap<String, bool>,
    /// Rollouts that touched the target (visits or realizations).
    pub target_hits: usize,
    pub success_before: f64,
    pub success_after: f64,
    pub steps_before_target: f64,
    pub steps_after_target: f64,
    pub steps_before_other: Option<f64>,
    pub steps_after_other: Option<f64>,
}

impl VerificationReport {
    pub fn succeeded(&self) -> bool {
        self.objective_met && self.preservation_met && self.memory_erased
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Target environment, comparison environments, the backend under test and
/// verification settings.
pub struct VerifyContext<'a> {
    pub target: &'a EvalEnv,
    pub others: &'a [EvalEnv],
    pub backend: &'a mut dyn PolicyBackend,
    pub options: VerifyOptions,
}

/// Per-rollout seed, independent of evaluation order.
pub fn rollout_seed(base: u64, env: usize, trial: usize, task: usize) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [env as u64, trial as u64, task as u64] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

struct Rollouts {
    /// Indexed by task (0 is collect-all), then trial.
    by_task: Vec<Vec<EpisodeResult>>,
}

impl Rollouts {
    fn canonical_mean_steps(&self) -> f64 {
        mean(self.by_task[0].iter().map(|e| e.steps as f64))
    }

    fn all(&self) -> impl Iterator<Item = &EpisodeResult> {
        self.by_task.iter().flatten()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn rollouts(
    env: &EvalEnv,
    env_index: usize,
    tasks: &[Task],
    backend: &mut dyn PolicyBackend,
    memory: &MemoryStore,
    constraints: &ConstraintSet,
    options: &VerifyOptions,
) -> Result<Rollouts, UnlearnError> {
    let mut scratch = memory.clone();
    let mut by_task = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let mut runs = Vec::with_capacity(options.trials);
        for trial in 0..options.trials {
            backend.reseed(rollout_seed(options.seed, env_index, trial, t));
            runs.push(run_task(
                &env.spec,
                backend,
                &mut scratch,
                constraints,
                task,
                options.budget,
            )?);
        }
        by_task.push(runs);
    }
    Ok(Rollouts { by_task })
}

/// `constraints` without the request's own target: the pre-unlearning view.
fn without_target(request: &UnlearnRequest, constraints: &ConstraintSet) -> ConstraintSet {
    let mut before = constraints.clone();
    match &request.scenario {
        Scenario::States(cells) => before.remove_states(&request.env_id, cells),
        Scenario::Trajectory(cells) => before.remove_sequence(&request.env_id, cells),
        Scenario::Environment => before.restore_env(&request.env_id),
    }
    before
}

fn route_edges(cells: &[Coord]) -> Vec<Vec<Coord>> {
    cells.windows(2).map(|w| w.to_vec()).collect()
}

/// Checks the scenario's success conditions by comparing rollouts under
/// `constraints` against rollouts with the request's target lifted.
pub fn verify(
    request: &UnlearnRequest,
    ctx: &mut VerifyContext<'_>,
    memory: &MemoryStore,
    constraints: &ConstraintSet,
) -> Result<VerificationReport, UnlearnError> {
    let opts = ctx.options.clone();
    if opts.trials == 0 {
        return Err(UnlearnError::Argument("trials must be at least 1".into()));
    }
    if ctx.target.tasks.is_empty() {
        return Err(UnlearnError::Argument("no evaluation tasks".into()));
    }
    if ctx.target.spec.env_id() != request.env_id {
        return Err(UnlearnError::Argument(format!(
            "request names {} but the target environment is {}",
            request.env_id,
            ctx.target.spec.env_id()
        )));
    }
    let before = without_target(request, constraints);
    let tasks = ctx.target.all_tasks();
    let spec = &ctx.target.spec;

    let pre = rollouts(ctx.target, 0, &tasks, ctx.backend, memory, &before, &opts)?;
    let post = rollouts(ctx.target, 0, &tasks, ctx.backend, memory, constraints, &opts)?;

    let mut others_before = Vec::new();
    let mut others_after = Vec::new();
    for (i, env) in ctx.others.iter().enumerate() {
        let canonical = [Task::collect_all(&env.spec)];
        let b = rollouts(env, i + 1, &canonical, ctx.backend, memory, &before, &opts)?;
        let a = rollouts(env, i + 1, &canonical, ctx.backend, memory, constraints, &opts)?;
        others_before.push(b.canonical_mean_steps());
        others_after.push(a.canonical_mean_steps());
    }

    // Tasks that remain achievable once the target is off limits.
    let mut blocked: EnvConstraints = before.for_env(spec.env_id());
    match &request.scenario {
        Scenario::States(cells) => blocked.forbidden.extend(cells.iter().copied()),
        Scenario::Trajectory(cells) => match opts.sequence_mode {
            SequenceMode::FullSequence => blocked.sequences.push(cells.clone()),
            SequenceMode::PerEdge => blocked.sequences.extend(route_edges(cells)),
        },
        Scenario::Environment => {}
    }
    let eligible: Vec<usize> = (0..tasks.len())
        .filter(|&i| match request.scenario {
            Scenario::Environment => true,
            _ => solvable(spec, &blocked, tasks[i].start, &tasks[i].objective),
        })
        .collect();
    let success_rate = |r: &Rollouts| {
        mean(
            eligible
                .iter()
                .flat_map(|&i| r.by_task[i].iter())
                .map(|e| if e.success { 1.0 } else { 0.0 }),
        )
    };
    let success_before = success_rate(&pre);
    let success_after = success_rate(&post);
    let preserved = (success_before - success_after) <= opts.success_tolerance + 1e-12;

    let mut checks = BTreeMap::new();
    let (objective_met, preservation_met, target_hits) = match &request.scenario {
        Scenario::States(cells) => {
            let hits = post
                .all()
                .filter(|e| cells.iter().any(|&c| e.trajectory.visits(c)))
                .count();
            checks.insert("eq2".to_string(), hits == 0);
            checks.insert("eq3".to_string(), preserved);
            (hits == 0, preserved, hits)
        }
        Scenario::Trajectory(cells) => {
            let patterns = match opts.sequence_mode {
                SequenceMode::FullSequence => vec![cells.clone()],
                SequenceMode::PerEdge => route_edges(cells),
            };
            let hits = post
                .all()
                .filter(|e| patterns.iter().any(|p| realizes(e.trajectory.positions(), p)))
                .count();
            checks.insert("eq5".to_string(), hits == 0);
            checks.insert("eq6".to_string(), preserved);
            (hits == 0, preserved, hits)
        }
        Scenario::Environment => {
            let inflated = post.canonical_mean_steps() > pre.canonical_mean_steps();
            let within = others_before
                .iter()
                .zip(&others_after)
                .all(|(b, a)| (a / b - 1.0).abs() <= opts.step_band + 1e-12);
            checks.insert("eq8".to_string(), inflated);
            checks.insert("eq9".to_string(), within);
            (inflated, within, 0)
        }
    };
    let memory_erased = memory.count_matching(&request.selector()) == 0;
    let other_mean = |v: &[f64]| (!v.is_empty()).then(|| mean(v.iter().copied()));
    Ok(VerificationReport {
        scenario: request.kind(),
        objective_met,
        preservation_met,
        memory_erased,
        checks,
        target_hits,
        success_before,
        success_after,
        steps_before_target: pre.canonical_mean_steps(),
        steps_after_target: post.canonical_mean_steps(),
        steps_before_other: other_mean(&others_before),
        steps_after_other: other_mean(&others_after),
    })
}

/// Erases the matching memory, merges the prompt's directives into the
/// constraints and verifies the outcome.
pub fn execute_unlearning(
    request: &UnlearnRequest,
    prompt: &UnlearnPrompt,
    memory: &mut MemoryStore,
    constraints: &mut ConstraintSet,
    ctx: &mut VerifyContext<'_>,
) -> Result<VerificationReport, UnlearnError> {
    request.check_consistent(&prompt.parsed)?;
    let selector = request.selector();
    memory.erase(&selector);
    memory.protect(selector);
    constraints.apply(&request.env_id, &prompt.parsed);
    verify(request, ctx, memory, constraints)
}


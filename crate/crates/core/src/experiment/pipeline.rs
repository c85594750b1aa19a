use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adversary::{
    attack_pairs, behavior_kl, candidate_pairs, inference_attack, kl_bound, never_seen_agent,
    reconstruct_environment, traversal_probability, Agent, AttackReport, AttackTarget,
};
use crate::agent::backend::PolicyBackend;
use crate::agent::constraints::ConstraintSet;
use crate::agent::memory::MemoryStore;
use crate::agent::remote::RemoteBackend;
use crate::agent::runtime::run_episode;
use crate::agent::scripted::ScriptedBackend;
use crate::conversion::{
    build_dataset, certify, reward_gap, run_radius, terseness_prior, train, write_trace_csv,
    Certificates, ConversionModel, FeatureMap, TrainOutcome,
};
use crate::experiment::config::{BackendConfig, ExperimentConfig};
use crate::experiment::ExperimentError;
use crate::grid::{generate, Coord, GridSpec, Trajectory};
use crate::metrics::{compute_metrics, heatmap, write_heatmap_csv, write_metrics_csv, MetricsRow, TaskRecord};
use crate::plan::{collapse, solvable, EnvConstraints, Objective};
use crate::unlearning::engine::rollout_seed;
use crate::unlearning::templates::directive_lines;
use crate::unlearning::{
    execute_unlearning, template_bank, verify, EvalEnv, Scenario, ScenarioKind, Strategy,
    UnlearnError, UnlearnRequest, VerificationReport, VerifyContext, VerifyOptions,
};

const EVAL_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const OTHER_STREAM: u64 = 2;

/// Mixes a base seed with a stream id and an index.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    rollout_seed(base, stream as usize, index as usize, 0x5eed)
}

/// Layout seed of the `index`-th grid of a stream. Kept small so that
/// environment ids stay readable.
fn layout_seed(base: u64, stream: u64, index: usize) -> u64 {
    base.wrapping_mul(100_000)
        .wrapping_add(stream * 10_000)
        .wrapping_add(index as u64)
}

/// Builds policy backends for one run. Remote clones share a connection
/// pool and in-flight limit.
#[derive(Clone)]
pub enum BackendFactory {
    Scripted,
    Remote(RemoteBackend),
}

impl BackendFactory {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self, ExperimentError> {
        match &config.backend {
            BackendConfig::Scripted => Ok(BackendFactory::Scripted),
            BackendConfig::Remote(r) => Ok(BackendFactory::Remote(RemoteBackend::new(r.clone())?)),
        }
    }

    pub fn make(&self, seed: u64) -> Box<dyn PolicyBackend + Send> {
        match self {
            BackendFactory::Scripted => Box::new(ScriptedBackend::new(seed)),
            BackendFactory::Remote(r) => {
                let mut b = r.clone();
                b.reseed(seed);
                Box::new(b)
            }
        }
    }
}

/// One unlearning task: the target grid with its probe tasks, comparison
/// grids, the request and the agent's memory before unlearning.
#[derive(Debug, Clone)]
pub struct GridCase {
    pub index: usize,
    pub target: EvalEnv,
    pub others: Vec<EvalEnv>,
    pub request: UnlearnRequest,
    pub memory: MemoryStore,
    pub verify: VerifyOptions,
}

fn shuffled<T>(mut items: Vec<T>, rng: &mut ChaCha8Rng) -> Vec<T> {
    items.shuffle(rng);
    items
}

fn choose_states(
    spec: &GridSpec,
    path: &[Coord],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<BTreeSet<Coord>> {
    let eligible = |c: &Coord| *c != spec.start() && !spec.treasures().any(|t| t == *c);
    let mut on_path: Vec<Coord> = Vec::new();
    for &c in path {
        if eligible(&c) && !on_path.contains(&c) {
            on_path.push(c);
        }
    }
    let off_path: Vec<Coord> = spec
        .free_cells()
        .filter(|c| eligible(c) && !on_path.contains(c))
        .collect();
    let order: Vec<Coord> = shuffled(on_path, rng)
        .into_iter()
        .chain(shuffled(off_path, rng))
        .collect();
    let mut chosen = BTreeSet::new();
    for c in order {
        if chosen.len() == k {
            break;
        }
        let mut trial = chosen.clone();
        trial.insert(c);
        let blocked = EnvConstraints {
            forbidden: trial.clone(),
            ..Default::default()
        };
        if solvable(spec, &blocked, spec.start(), &Objective::CollectAll)
            && !candidate_pairs(spec, &AttackTarget::States(trial.clone())).is_empty()
        {
            chosen = trial;
        }
    }
    (chosen.len() == k).then_some(chosen)
}

fn choose_route(
    spec: &GridSpec,
    path: &[Coord],
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Coord>> {
    let windows: Vec<Vec<Coord>> = collapse(path.iter().copied())
        .windows(len)
        .filter(|w| w.iter().collect::<BTreeSet<_>>().len() == w.len())
        .map(<[Coord]>::to_vec)
        .collect();
    shuffled(windows, rng).into_iter().find(|w| {
        let blocked = EnvConstraints {
            sequences: vec![w.clone()],
            ..Default::default()
        };
        solvable(spec, &blocked, spec.start(), &Objective::CollectAll)
            && !candidate_pairs(spec, &AttackTarget::Trajectory(w.clone())).is_empty()
    })
}

fn random_pairs(
    spec: &GridSpec,
    excluded: &BTreeSet<Coord>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Coord, Coord)> {
    let cells: Vec<Coord> = spec
        .reachable_from(spec.start())
        .into_iter()
        .filter(|c| !excluded.contains(c))
        .collect();
    if cells.len() < 2 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let s = rng.random_range(0..cells.len());
            let g = (s + rng.random_range(1..cells.len())) % cells.len();
            (cells[s], cells[g])
        })
        .collect()
}

fn attack_target(scenario: &Scenario) -> Option<AttackTarget> {
    match scenario {
        Scenario::States(cells) => Some(AttackTarget::States(cells.clone())),
        Scenario::Trajectory(cells) => Some(AttackTarget::Trajectory(cells.clone())),
        Scenario::Environment => None,
    }
}

fn make_grid(config: &ExperimentConfig, seed: u64) -> Result<GridSpec, ExperimentError> {
    let g = &config.grids;
    generate(seed, g.width, g.height, g.obstacles, g.treasures)
        .map_err(|e| ExperimentError::Failed(e.to_string()))
}

/// Generates the `index`-th grid of a stream (0 for evaluation, 1 for
/// converter training), runs the pre-unlearning episodes and picks the
/// unlearning target.
pub fn prepare_case(
    config: &ExperimentConfig,
    factory: &BackendFactory,
    stream: u64,
    index: usize,
) -> Result<GridCase, ExperimentError> {
    let case_seed = derive_seed(config.seed, stream, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let spec = make_grid(config, layout_seed(config.seed, stream, index))?;
    let others: Vec<GridSpec> = (0..config.scenario.other_envs)
        .map(|j| {
            let k = (stream as usize * 1_000 + index) * config.scenario.other_envs + j;
            make_grid(config, layout_seed(config.seed, OTHER_STREAM, k))
        })
        .collect::<Result<_, _>>()?;

    let mut memory = MemoryStore::new();
    let mut backend = factory.make(case_seed);
    let empty = ConstraintSet::new();
    let pre = run_episode(&spec, backend.as_mut(), &mut memory, &empty, config.verify.budget)?;
    for o in &others {
        run_episode(o, backend.as_mut(), &mut memory, &empty, config.verify.budget)?;
    }
    let path: Vec<Coord> = pre.trajectory.positions().collect();

    let env_id = spec.env_id().to_string();
    let request = match config.scenario.kind {
        ScenarioKind::State => {
            let cells = choose_states(&spec, &path, config.scenario.states, &mut rng).ok_or_else(|| {
                ExperimentError::Failed(format!(
                    "{env_id}: no {} states can be forgotten while every treasure stays reachable",
                    config.scenario.states
                ))
            })?;
            UnlearnRequest::states(env_id.clone(), cells)
        }
        ScenarioKind::Trajectory => {
            let route = choose_route(&spec, &path, config.scenario.route_length, &mut rng)
                .ok_or_else(|| {
                    ExperimentError::Failed(format!("{env_id}: no route of the episode can be forgotten"))
                })?;
            UnlearnRequest::trajectory(env_id.clone(), route)
        }
        ScenarioKind::Environment => UnlearnRequest::environment(env_id.clone()),
    }?;

    let n = config.eval_tasks;
    let (mut tasks, excluded) = match attack_target(&request.scenario) {
        Some(target) => {
            let crossing = attack_pairs(&spec, &target, n.div_ceil(2), rng.random())?;
            let excluded = match &target {
                AttackTarget::States(cells) => cells.clone(),
                AttackTarget::Trajectory(_) => BTreeSet::new(),
            };
            (crossing, excluded)
        }
        None => (Vec::new(), BTreeSet::new()),
    };
    let rest = n - tasks.len();
    tasks.extend(random_pairs(&spec, &excluded, rest, &mut rng));

    let verify = VerifyOptions {
        seed: derive_seed(config.verify.seed ^ config.seed, stream, index as u64),
        ..config.verify.clone()
    };
    Ok(GridCase {
        index,
        target: EvalEnv::new(spec, tasks),
        others: others.into_iter().map(|s| EvalEnv::new(s, Vec::new())).collect(),
        request,
        memory,
        verify,
    })
}

/// Converter after training, with what the training saw.
#[derive(Debug, Clone)]
pub struct TrainedConverter {
    pub model: ConversionModel,
    pub dataset_pairs: usize,
    pub outcome: Option<TrainOutcome>,
    pub certificates: Option<Certificates>,
}

/// Verified result of executing one rendered prompt on fresh copies of the
/// case's memory and constraints. `None` when the prompt does not fit the
/// request.
fn attempt(
    case: &GridCase,
    model: &ConversionModel,
    template_id: usize,
    noise_seed: u64,
    backend: &mut dyn PolicyBackend,
) -> Result<(Option<VerificationReport>, MemoryStore, ConstraintSet), ExperimentError> {
    let prompt = model.render(&case.request, template_id, noise_seed);
    let mut memory = case.memory.clone();
    let mut constraints = ConstraintSet::new();
    let mut ctx = VerifyContext {
        target: &case.target,
        others: &case.others,
        backend,
        options: case.verify.clone(),
    };
    match execute_unlearning(&case.request, &prompt, &mut memory, &mut constraints, &mut ctx) {
        Ok(report) => Ok((Some(report), memory, constraints)),
        Err(UnlearnError::Consistency(_)) => Ok((None, case.memory.clone(), ConstraintSet::new())),
        Err(e) => Err(e.into()),
    }
}

/// Builds preference data on the training grids and runs gradient descent
/// with the certified step unless the config fixes one. With fewer than two
/// draws per request no pair can form and the base parameters are kept.
pub fn train_converter(
    config: &ExperimentConfig,
    factory: &BackendFactory,
    strategy: Strategy,
    m: usize,
) -> Result<TrainedConverter, ExperimentError> {
    let features = FeatureMap::Handcrafted;
    let mut model = ConversionModel::new(
        template_bank(config.scenario.kind, strategy),
        features,
        config.beta,
        terseness_prior(&features),
    )
    .map_err(|e| ExperimentError::Config(e.to_string()))?;

    let draw_seed = derive_seed(config.seed, TRAIN_STREAM, u64::MAX);
    let cases: Vec<GridCase> = (0..config.training_grids)
        .into_par_iter()
        .map(|i| prepare_case(config, factory, TRAIN_STREAM, i))
        .collect::<Result<_, _>>()?;
    let per_case: Vec<_> = cases
        .par_iter()
        .map(|case| {
            let noise = derive_seed(config.seed, TRAIN_STREAM + 100, case.index as u64);
            let mut backend = factory.make(case.verify.seed);
            let mut seen: HashMap<String, bool> = HashMap::new();
            let mut failure = None;
            let triples = build_dataset(
                &model,
                std::slice::from_ref(&case.request),
                m,
                draw_seed.wrapping_add(case.index as u64),
                |_, template| {
                    let key = format!("{:?}", model.render(&case.request, template.id, noise).parsed);
                    if let Some(&ok) = seen.get(&key) {
                        return ok;
                    }
                    let ok = match attempt(case, &model, template.id, noise, backend.as_mut()) {
                        Ok((report, _, _)) => report.is_some_and(|r| r.succeeded()),
                        Err(e) => {
                            failure.get_or_insert(e);
                            false
                        }
                    };
                    seen.insert(key, ok);
                    ok
                },
            )
            .map_err(|e| ExperimentError::Failed(e.to_string()))?;
            match failure {
                Some(e) => Err(e),
                None => Ok(triples),
            }
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let triples: Vec<_> = per_case.into_iter().flatten().collect();

    if triples.is_empty() {
        return Ok(TrainedConverter {
            model,
            dataset_pairs: 0,
            outcome: None,
            certificates: None,
        });
    }
    let fail = |e: &dyn std::fmt::Display| ExperimentError::Failed(e.to_string());
    let samples = model.pair_samples(&triples).map_err(|e| fail(&e))?;
    let objective = model.objective(samples).map_err(|e| fail(&e))?;
    let start = model.phi_base().clone();
    let certs = certify(&objective, run_radius(&objective, &start)).map_err(|e| fail(&e))?;
    let eta = config.train.eta.unwrap_or(certs.eta);
    let outcome = train(&objective, &start, eta, &config.train).map_err(|e| fail(&e))?;
    model.phi = outcome.phi.clone();
    Ok(TrainedConverter {
        model,
        dataset_pairs: triples.len(),
        outcome: Some(outcome),
        certificates: Some(certs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttemptLog {
    pub template_id: usize,
    pub consistent: bool,
    pub success: bool,
}

/// Attack results for one grid. For environment requests the inference
/// fields compare reconstruction success rates instead of traversal rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridAttack {
    pub env_id: String,
    pub pre_traversal_prob: Option<f64>,
    pub pre_reconstruction: Option<f64>,
    pub reference_reconstruction: Option<f64>,
    pub eps_reward: f64,
    #[serde(flatten)]
    pub report: AttackReport,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub env_id: String,
    pub request: UnlearnRequest,
    pub attempts: Vec<AttemptLog>,
    pub report: VerificationReport,
    pub record: TaskRecord,
    pub heatmap: Vec<Vec<u64>>,
    pub attack: Option<GridAttack>,
    pub memory: MemoryStore,
    pub constraints: ConstraintSet,
}

/// `Q(y)`: chance that template `y` keeps every directive of the request.
fn keep_all_probability(model: &ConversionModel, request: &UnlearnRequest) -> Vec<f64> {
    let n = directive_lines(request).len() as i32;
    model
        .bank()
        .templates
        .iter()
        .map(|t| t.completeness().powi(n))
        .collect()
}

fn post_trajectories(
    case: &GridCase,
    backend: &mut dyn PolicyBackend,
    memory: &MemoryStore,
    constraints: &ConstraintSet,
) -> Result<Vec<Trajectory>, ExperimentError> {
    let mut scratch = memory.clone();
    let mut out = Vec::new();
    for (t, task) in case.target.all_tasks().iter().enumerate() {
        for trial in 0..case.verify.trials {
            backend.reseed(rollout_seed(case.verify.seed, 3, trial, t));
            let ep = crate::agent::runtime::run_task(
                &case.target.spec,
                backend,
                &mut scratch,
                constraints,
                task,
                case.verify.budget,
            )?;
            out.push(ep.trajectory);
        }
    }
    Ok(out)
}

fn attack_case(
    config: &ExperimentConfig,
    factory: &BackendFactory,
    case: &GridCase,
    converter: &TrainedConverter,
    memory: &MemoryStore,
    constraints: &ConstraintSet,
) -> Result<GridAttack, ExperimentError> {
    let spec = &case.target.spec;
    let env_id = spec.env_id().to_string();
    let acfg = crate::adversary::AttackConfig {
        seed: derive_seed(config.attack.seed ^ config.seed, 7, case.index as u64),
        ..config.attack.clone()
    };
    let seed = acfg.seed;
    let mut un_backend = factory.make(seed);
    let mut pre_backend = factory.make(seed);
    let empty = ConstraintSet::new();

    // The never-seen agent: never had the target in memory or prompts.
    let mut ref_memory = case.memory.clone();
    ref_memory.erase(&case.request.selector());
    let (mut ref_backend, ref_constraints): (Box<dyn PolicyBackend + Send>, ConstraintSet) = match factory {
        BackendFactory::Scripted => (
            Box::new(never_seen_agent(&env_id, &case.request.scenario, seed)),
            ConstraintSet::new(),
        ),
        BackendFactory::Remote(_) => {
            let mut c = ConstraintSet::new();
            match &case.request.scenario {
                Scenario::States(cells) => cells.iter().for_each(|&x| c.forbid_state(&env_id, x)),
                Scenario::Trajectory(cells) => c.forbid_sequence(&env_id, cells.clone()),
                Scenario::Environment => c.degrade(&env_id),
            }
            (factory.make(seed), c)
        }
    };

    let mut unlearned = Agent {
        backend: un_backend.as_mut(),
        memory,
        constraints,
    };
    let mut reference = Agent {
        backend: ref_backend.as_mut(),
        memory: &ref_memory,
        constraints: &ref_constraints,
    };

    let eps_reward = reward_gap(
        &converter.model,
        &case.request,
        &keep_all_probability(&converter.model, &case.request),
    );
    let tasks = case.target.all_tasks();
    let kl = behavior_kl(
        spec,
        &mut unlearned,
        &mut reference,
        &tasks,
        acfg.trials_per_pair,
        acfg.budget,
        seed,
    )?;

    let mut pre = Agent {
        backend: pre_backend.as_mut(),
        memory: &case.memory,
        constraints: &empty,
    };
    let (report, pre_traversal, pre_rec, ref_rec) = match attack_target(&case.request.scenario) {
        Some(target) => {
            let verdict = inference_attack(&target, spec, &mut unlearned, &mut reference, &acfg)?;
            let pairs = attack_pairs(spec, &target, acfg.n_pairs, acfg.seed)?;
            let pre_prob = traversal_probability(spec, &mut pre, &target, &pairs, &acfg)?;
            let report = AttackReport {
                target: target.to_string(),
                traversal_prob: verdict.traversal_prob,
                reference_prob: verdict.reference_prob,
                distinguishable: verdict.distinguishable,
                reconstruction_success_rate: None,
                kl_estimate: Some(kl),
                kl_bound: Some(kl_bound(config.l_lip, eps_reward)),
            };
            (report, Some(pre_prob), None, None)
        }
        None => {
            let budget = config.exploration_budget;
            let un = reconstruct_environment(spec, &mut unlearned, budget, seed)?.success_rate;
            let rf = reconstruct_environment(spec, &mut reference, budget, seed)?.success_rate;
            let pr = reconstruct_environment(spec, &mut pre, budget, seed)?.success_rate;
            let report = AttackReport {
                target: format!("environment {env_id}"),
                traversal_prob: un,
                reference_prob: rf,
                distinguishable: (un - rf).abs() > acfg.margin,
                reconstruction_success_rate: Some(un),
                kl_estimate: Some(kl),
                kl_bound: Some(kl_bound(config.l_lip, eps_reward)),
            };
            (report, None, Some(pr), Some(rf))
        }
    };
    Ok(GridAttack {
        env_id,
        pre_traversal_prob: pre_traversal,
        pre_reconstruction: pre_rec,
        reference_reconstruction: ref_rec,
        eps_reward,
        report,
    })
}

/// Up to `attempts` independent prompt draws, each executed on fresh
/// copies of the pre-unlearning memory, stopping at the first verified
/// success. The state after the last executed attempt is kept.
pub fn run_case(
    config: &ExperimentConfig,
    factory: &BackendFactory,
    case: &GridCase,
    converter: &TrainedConverter,
    with_attacks: bool,
) -> Result<GridOutcome, ExperimentError> {
    let mut backend = factory.make(case.verify.seed);
    let draws = converter
        .model
        .sample_prompts(
            &case.request,
            config.attempts,
            derive_seed(config.seed, 11, case.index as u64),
        )
        .map_err(|e| ExperimentError::Failed(e.to_string()))?;
    // Omission noise belongs to the request; attempts differ only in the
    // template drawn.
    let noise = derive_seed(config.seed, 12, case.index as u64);
    let mut logs = Vec::new();
    let mut last: Option<(VerificationReport, MemoryStore, ConstraintSet)> = None;
    for &template_id in &draws {
        let (report, memory, constraints) =
            attempt(case, &converter.model, template_id, noise, backend.as_mut())?;
        let success = report.as_ref().is_some_and(VerificationReport::succeeded);
        logs.push(AttemptLog {
            template_id,
            consistent: report.is_some(),
            success,
        });
        if let Some(r) = report {
            last = Some((r, memory, constraints));
        }
        if success {
            break;
        }
    }
    let (report, memory, constraints) = match last {
        Some(l) => l,
        None => {
            // Nothing was executed: the agent is unchanged.
            let memory = case.memory.clone();
            let constraints = ConstraintSet::new();
            let mut ctx = VerifyContext {
                target: &case.target,
                others: &case.others,
                backend: backend.as_mut(),
                options: case.verify.clone(),
            };
            (verify(&case.request, &mut ctx, &memory, &constraints)?, memory, constraints)
        }
    };
    let record = TaskRecord {
        attempts: logs.iter().map(|l| l.success).collect(),
        success_before: report.success_before,
        success_after: report.success_after,
        steps_before: report.steps_before_target,
        steps_after_target: report.steps_after_target,
        steps_after_other: report.steps_after_other,
    };
    let trajectories = post_trajectories(case, backend.as_mut(), &memory, &constraints)?;
    let counts = heatmap(&trajectories, &case.target.spec)
        .map_err(|e| ExperimentError::Failed(e.to_string()))?;
    let attack = if with_attacks {
        Some(attack_case(config, factory, case, converter, &memory, &constraints)?)
    } else {
        None
    };
    Ok(GridOutcome {
        env_id: case.target.spec.env_id().to_string(),
        request: case.request.clone(),
        attempts: logs,
        report,
        record,
        heatmap: counts,
        attack,
        memory,
        constraints,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub converter: TrainedConverter,
    pub grids: Vec<GridOutcome>,
    pub metrics: MetricsRow,
    pub checks: Vec<CheckResult>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn attacks(&self) -> Vec<&GridAttack> {
        self.grids.iter().filter_map(|g| g.attack.as_ref()).collect()
    }

    /// Mean target-environment steps after over before.
    pub fn target_step_ratio(&self) -> f64 {
        let before: f64 = self.grids.iter().map(|g| g.report.steps_before_target).sum();
        let after: f64 = self.grids.iter().map(|g| g.report.steps_after_target).sum();
        after / before
    }

    /// Same for the comparison environments; `None` without any.
    pub fn other_step_ratio(&self) -> Option<f64> {
        let pairs: Vec<(f64, f64)> = self
            .grids
            .iter()
            .filter_map(|g| Some((g.report.steps_before_other?, g.report.steps_after_other?)))
            .collect();
        if pairs.is_empty() {
            return None;
        }
        let before: f64 = pairs.iter().map(|p| p.0).sum();
        let after: f64 = pairs.iter().map(|p| p.1).sum();
        Some(after / before)
    }
}

fn range_check(name: &str, value: Option<f64>, range: [f64; 2]) -> CheckResult {
    let passed = value.is_some_and(|v| v >= range[0] && v <= range[1]);
    CheckResult {
        name: name.to_string(),
        passed,
        detail: match value {
            Some(v) => format!("{v:.4} in [{}, {}]", range[0], range[1]),
            None => "not measured".into(),
        },
    }
}

fn evaluate_checks(outcome: &ExperimentOutcome) -> Vec<CheckResult> {
    let a = &outcome.config.acceptance;
    let m = &outcome.metrics;
    let mut out = Vec::new();
    if let Some(min) = a.min_efficacy {
        out.push(CheckResult {
            name: "efficacy".into(),
            passed: m.unlearn_efficacy >= min,
            detail: format!("{:.4} >= {min}", m.unlearn_efficacy),
        });
    }
    if let Some(min) = a.min_unlearn_at_1 {
        out.push(CheckResult {
            name: "unlearn_at_1".into(),
            passed: m.unlearn_at_1 >= min,
            detail: format!("{:.4} >= {min}", m.unlearn_at_1),
        });
    }
    if let Some(r) = a.target_step_ratio {
        out.push(range_check("target_step_ratio", Some(outcome.target_step_ratio()), r));
    }
    if let Some(r) = a.other_step_ratio {
        out.push(range_check("other_step_ratio", outcome.other_step_ratio(), r));
    }
    if let Some(min) = a.min_indistinguishable {
        let attacks = outcome.attacks();
        let share = if attacks.is_empty() {
            0.0
        } else {
            attacks.iter().filter(|x| !x.report.distinguishable).count() as f64 / attacks.len() as f64
        };
        out.push(CheckResult {
            name: "indistinguishable".into(),
            passed: !attacks.is_empty() && share >= min,
            detail: format!("{share:.4} >= {min}"),
        });
    }
    out
}

/// Runs the whole pipeline on `jobs` worker threads. Results do not depend
/// on `jobs`.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let factory = BackendFactory::from_config(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Failed(e.to_string()))?;
    pool.install(|| {
        let converter = train_converter(config, &factory, config.strategy, config.m)?;
        let grids: Vec<GridOutcome> = (0..config.grids.count)
            .into_par_iter()
            .map(|i| {
                let case = prepare_case(config, &factory, EVAL_STREAM, i)?;
                run_case(config, &factory, &case, &converter, config.run_attacks)
            })
            .collect::<Result<_, _>>()?;
        let records: Vec<TaskRecord> = grids.iter().map(|g| g.record.clone()).collect();
        let metrics = compute_metrics(config.strategy.label(), &records)
            .map_err(|e| ExperimentError::Failed(e.to_string()))?;
        let mut outcome = ExperimentOutcome {
            config: config.clone(),
            converter,
            grids,
            metrics,
            checks: Vec::new(),
        };
        outcome.checks = evaluate_checks(&outcome);
        Ok(outcome)
    })
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    strategy: &'a str,
    m: usize,
    dataset_pairs: usize,
    certificates: Option<&'a Certificates>,
    eta_used: Option<f64>,
    iterations: usize,
    l_star: Option<f64>,
    final_loss: Option<f64>,
    phi: Vec<f64>,
}

#[derive(Serialize)]
struct AttackFile<'a> {
    attacks: Vec<&'a GridAttack>,
}

fn failed(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Failed(e.to_string())
}

/// Writes metrics.csv, heatmap_<grid>.csv, certificates.json,
/// attack_report.json and training_trace.csv into `dir`.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(
        std::slice::from_ref(&outcome.metrics),
        BufWriter::new(File::create(dir.join("metrics.csv"))?),
    )
    .map_err(failed)?;
    for g in &outcome.grids {
        let file = File::create(dir.join(format!("heatmap_{}.csv", g.env_id)))?;
        write_heatmap_csv(&g.heatmap, BufWriter::new(file)).map_err(failed)?;
    }
    write_training(outcome, dir)?;
    write_attack_report(outcome, dir)
}

pub fn write_attack_report(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let file = AttackFile {
        attacks: outcome.attacks(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(failed)?;
    fs::write(dir.join("attack_report.json"), text + "\n")?;
    Ok(())
}

fn write_training(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), ExperimentError> {
    let c = &outcome.converter;
    let trace = c.outcome.as_ref().map(|o| o.trace.as_slice()).unwrap_or(&[]);
    let summary = TrainingSummary {
        strategy: outcome.config.strategy.label(),
        m: outcome.config.m,
        dataset_pairs: c.dataset_pairs,
        certificates: c.certificates.as_ref(),
        eta_used: c
            .certificates
            .as_ref()
            .map(|cert| outcome.config.train.eta.unwrap_or(cert.eta)),
        iterations: trace.len().saturating_sub(1),
        l_star: c.outcome.as_ref().and_then(|o| o.l_star),
        final_loss: trace.last().map(|r| r.loss),
        phi: c.model.phi.iter().copied().collect(),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(failed)?;
    fs::write(dir.join("certificates.json"), text + "\n")?;
    write_trace_csv(trace, BufWriter::new(File::create(dir.join("training_trace.csv"))?)).map_err(failed)?;
    Ok(())
}

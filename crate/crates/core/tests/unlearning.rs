use std::collections::BTreeSet;

use proptest::prelude::{any, Strategy as _, prop, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use agent_unlearn::experiment::pipeline::derive_seed;
use agent_unlearn::agent::{run_episode, run_task, ConstraintSet, MemoryStore, ScriptedBackend, Task};
use agent_unlearn::grid::{bfs_oracle, generate, Coord, GridSpec};
use agent_unlearn::plan::Objective;
use agent_unlearn::unlearning::{
    execute_unlearning, parse_directives, template_bank, verify, EvalEnv, ScenarioKind, Strategy, UnlearnError,
    UnlearnPrompt, UnlearnRequest, VerifyContext, VerifyOptions, PROMPT_MARKER,
};

fn fixture() -> GridSpec {
    generate(42, 8, 8, 10, 3).unwrap()
}

fn greedy_path(spec: &GridSpec) -> Vec<Coord> {
    let mut memory = MemoryStore::new();
    let ep = run_episode(spec, &mut ScriptedBackend::new(0), &mut memory, &ConstraintSet::new(), 200).unwrap();
    ep.trajectory.positions().collect()
}

fn all_treasures_reachable(spec: &GridSpec, forbidden: &BTreeSet<Coord>) -> bool {
    spec.treasures()
        .all(|t| bfs_oracle(spec, spec.start(), t, forbidden).unwrap().is_some())
}

/// A cell on the canonical path that can be forgotten with every treasure
/// still reachable.
fn forgettable_cell(spec: &GridSpec) -> Coord {
    greedy_path(spec)
        .into_iter()
        .filter(|&c| c != spec.start() && spec.treasures().all(|t| t != c))
        .find(|&c| all_treasures_reachable(spec, &BTreeSet::from([c])))
        .expect("some path cell has a detour")
}

/// Pairs whose every shortest path crosses `cell`: forbidding the cell makes
/// the trip longer or impossible.
fn crossing_pairs(spec: &GridSpec, cell: Coord) -> Vec<(Coord, Coord)> {
    let blocked = BTreeSet::from([cell]);
    let free: Vec<Coord> = spec.free_cells().filter(|&c| c != cell).collect();
    let mut out = Vec::new();
    for &s in &free {
        for &g in &free {
            if s == g {
                continue;
            }
            let Some(plain) = bfs_oracle(spec, s, g, &BTreeSet::new()).unwrap() else {
                continue;
            };
            let detour = bfs_oracle(spec, s, g, &blocked).unwrap();
            if detour.is_none_or(|d| d.len() > plain.len()) {
                out.push((s, g));
            }
        }
    }
    out
}

fn nl_prompt(request: &UnlearnRequest) -> UnlearnPrompt {
    template_bank(request.kind(), Strategy::NaturalLanguage).templates[0].render(request, 0)
}

fn options(trials: usize) -> VerifyOptions {
    VerifyOptions {
        trials,
        ..VerifyOptions::default()
    }
}

#[test]
fn empty_text_parses_to_nothing() {
    assert!(parse_directives("").unwrap().is_empty());
}

#[test]
fn single_avoid_state() {
    let d = parse_directives("AVOID-STATE 2,3").unwrap();
    assert_eq!(d.avoid_states, BTreeSet::from([Coord(2, 3)]));
    assert!(d.sequences.is_empty() && d.forget_envs.is_empty());
}

#[test]
fn unknown_lines_are_ignored_and_bad_coordinates_rejected() {
    assert!(parse_directives("hello\nAVOID-STATES 1,1\n# AVOID-STATE x").unwrap().is_empty());
    let e = parse_directives("prose\nprose\nAVOID-STATE 1;1").unwrap_err();
    assert_eq!(e.line, 3);
}

#[test]
fn nl_template_carries_every_state_directive() {
    let cells = [Coord(1, 2), Coord(4, 0), Coord(6, 6)];
    let request = UnlearnRequest::states("grid-a", cells).unwrap();
    let line = Regex::new(r"(?m)^AVOID-STATE (\d+),(\d+)$").unwrap();
    for t in &template_bank(ScenarioKind::State, Strategy::NaturalLanguage).templates {
        for noise in 0..20 {
            let p = t.render(&request, noise);
            assert!(p.prompt_text.starts_with(PROMPT_MARKER));
            let scanned: BTreeSet<Coord> = line
                .captures_iter(&p.prompt_text)
                .map(|c| Coord(c[1].parse().unwrap(), c[2].parse().unwrap()))
                .collect();
            assert_eq!(line.find_iter(&p.prompt_text).count(), 3);
            assert_eq!(scanned, BTreeSet::from(cells));
            assert_eq!(p.parsed.avoid_states, scanned);
        }
    }
}

#[test]
fn banks_have_at_least_six_templates() {
    for kind in ScenarioKind::ALL {
        for strategy in Strategy::ALL {
            assert!(template_bank(kind, strategy).len() >= 6);
        }
    }
}

/// Directive omission frequency over `draws` draws of a uniformly chosen
/// template, with noise seeds taken from the run pipeline's noise stream.
fn omission_frequency(strategy: Strategy, draws: u64) -> f64 {
    let bank = template_bank(ScenarioKind::State, strategy);
    let request = UnlearnRequest::states("grid-a", [Coord(3, 3)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut omitted = 0;
    for noise in 0..draws {
        let t = &bank.templates[rng.random_range(0..bank.len())];
        if t.render(&request, derive_seed(0, 12, noise)).parsed.avoid_states.is_empty() {
            omitted += 1;
        }
    }
    omitted as f64 / draws as f64
}

#[test]
fn example_bank_omits_one_directive_in_five() {
    let f = omission_frequency(Strategy::Example, 1000);
    assert!((f - 0.2).abs() <= 0.03, "{f}");
}

#[test]
fn omission_rate_is_unbiased_over_a_long_stream() {
    let f = omission_frequency(Strategy::Example, 100_000);
    assert!((f - 0.2).abs() <= 0.005, "{f}");
}

#[test]
fn code_bank_omits_one_directive_in_twenty() {
    let f = omission_frequency(Strategy::Code, 1000);
    assert!((f - 0.05).abs() <= 0.02, "{f}");
    assert_eq!(omission_frequency(Strategy::NaturalLanguage, 1000), 0.0);
}

#[test]
fn expected_completeness_is_ordered() {
    for kind in ScenarioKind::ALL {
        let mean = |s| {
            let bank = template_bank(kind, s);
            bank.templates.iter().map(|t| t.completeness()).sum::<f64>() / bank.len() as f64
        };
        let (nl, code, ex) = (mean(Strategy::NaturalLanguage), mean(Strategy::Code), mean(Strategy::Example));
        assert!(nl >= code && code >= ex && nl > ex, "{nl} {code} {ex}");
    }
}

#[test]
fn state_unlearning_holds_under_exhaustive_rollout() {
    let spec = fixture();
    let cell = forgettable_cell(&spec);
    let request = UnlearnRequest::states(spec.env_id(), [cell]).unwrap();
    let tasks: Vec<(Coord, Coord)> = crossing_pairs(&spec, cell).into_iter().take(10).collect();
    let target = EvalEnv::new(spec.clone(), tasks);
    let mut memory = MemoryStore::new();
    run_episode(&spec, &mut ScriptedBackend::new(0), &mut memory, &ConstraintSet::new(), 200).unwrap();
    assert!(memory.entries(spec.env_id()).iter().any(|e| e.state.position == cell));
    let mut constraints = ConstraintSet::new();
    let mut backend = ScriptedBackend::new(5);
    let mut ctx = VerifyContext {
        target: &target,
        others: &[],
        backend: &mut backend,
        options: options(10),
    };
    let report = execute_unlearning(&request, &nl_prompt(&request), &mut memory, &mut constraints, &mut ctx).unwrap();
    assert!(report.objective_met && report.preservation_met && report.memory_erased);
    assert_eq!(report.checks["eq2"], true);
    assert_eq!(report.target_hits, 0);
    assert!(memory.entries(spec.env_id()).iter().all(|e| e.state.position != cell));

    // Every free start, both task kinds, a fresh agent each time.
    for start in spec.free_cells().filter(|&c| c != cell) {
        for goal in spec.free_cells().filter(|&c| c != cell).step_by(7) {
            for task in [Task { start, objective: Objective::CollectAll }, Task::reach(start, goal)] {
                let ep = run_task(&spec, &mut ScriptedBackend::new(1), &mut memory.clone(), &constraints, &task, 200).unwrap();
                assert!(!ep.trajectory.visits(cell), "{start} {task:?}");
            }
        }
    }
}

#[test]
fn unchanged_agent_visits_the_target() {
    let spec = fixture();
    let cell = forgettable_cell(&spec);
    let request = UnlearnRequest::states(spec.env_id(), [cell]).unwrap();
    let target = EvalEnv::new(spec.clone(), crossing_pairs(&spec, cell).into_iter().take(3).collect());
    let mut backend = ScriptedBackend::new(5);
    let mut ctx = VerifyContext {
        target: &target,
        others: &[],
        backend: &mut backend,
        options: options(2),
    };
    let report = verify(&request, &mut ctx, &MemoryStore::new(), &ConstraintSet::new()).unwrap();
    assert!(!report.objective_met);
    assert!(report.target_hits > 0);
}

#[test]
fn verify_needs_tasks_and_trials() {
    let spec = fixture();
    let request = UnlearnRequest::environment(spec.env_id()).unwrap();
    let target = EvalEnv::new(spec.clone(), Vec::new());
    let mut backend = ScriptedBackend::new(5);
    let mut ctx = VerifyContext {
        target: &target,
        others: &[],
        backend: &mut backend,
        options: options(1),
    };
    assert!(matches!(
        verify(&request, &mut ctx, &MemoryStore::new(), &ConstraintSet::new()),
        Err(UnlearnError::Argument(_))
    ));
}

#[test]
fn route_request_needs_a_sequence_directive() {
    let spec = fixture();
    let path = greedy_path(&spec);
    let request = UnlearnRequest::trajectory(spec.env_id(), path[..3].to_vec()).unwrap();
    let wrong = UnlearnPrompt::from_text(format!("{PROMPT_MARKER} forget\nAVOID-STATE {}\n", path[1]), Strategy::Code, 0).unwrap();
    let target = EvalEnv::new(spec.clone(), vec![(spec.start(), path[2])]);
    let mut backend = ScriptedBackend::new(5);
    let mut ctx = VerifyContext {
        target: &target,
        others: &[],
        backend: &mut backend,
        options: options(1),
    };
    let err = execute_unlearning(&request, &wrong, &mut MemoryStore::new(), &mut ConstraintSet::new(), &mut ctx).unwrap_err();
    assert!(matches!(err, UnlearnError::Consistency(_)));
}

#[test]
fn route_unlearning_blocks_only_the_sequence() {
    let spec = fixture();
    let path = greedy_path(&spec);
    let route = path[1..4].to_vec();
    let request = UnlearnRequest::trajectory(spec.env_id(), route.clone()).unwrap();
    let target = EvalEnv::new(spec.clone(), vec![(path[0], path[4]), (path[1], path[3])]);
    let mut memory = MemoryStore::new();
    run_episode(&spec, &mut ScriptedBackend::new(0), &mut memory, &ConstraintSet::new(), 200).unwrap();
    let mut constraints = ConstraintSet::new();
    let mut backend = ScriptedBackend::new(5);
    let mut ctx = VerifyContext {
        target: &target,
        others: &[],
        backend: &mut backend,
        options: options(3),
    };
    let report = execute_unlearning(&request, &nl_prompt(&request), &mut memory, &mut constraints, &mut ctx).unwrap();
    assert!(report.succeeded(), "{}", report.to_json());
    assert_eq!(report.checks["eq5"], true);
    assert_eq!(report.checks["eq6"], true);
    // The cells themselves stay usable.
    let ep = run_task(&spec, &mut backend, &mut memory.clone(), &constraints, &Task::reach(path[0], route[1]), 200).unwrap();
    assert!(ep.success);
}

#[test]
fn environment_unlearning_degrades_and_empties_memory() {
    let spec = fixture();
    let other = generate(43, 8, 8, 10, 3).unwrap();
    let request = UnlearnRequest::environment(spec.env_id()).unwrap();
    let mut memory = MemoryStore::new();
    for s in [&spec, &other] {
        run_episode(s, &mut ScriptedBackend::new(0), &mut memory, &ConstraintSet::new(), 200).unwrap();
    }
    let other_before = memory.entries(other.env_id()).len();
    let target = EvalEnv::new(spec.clone(), vec![(spec.start(), Coord(0, 7))]);
    let others = [EvalEnv::new(other.clone(), Vec::new())];
    let mut constraints = ConstraintSet::new();
    let mut backend = ScriptedBackend::new(5);
    let mut ctx = VerifyContext {
        target: &target,
        others: &others,
        backend: &mut backend,
        options: options(10),
    };
    let report = execute_unlearning(&request, &nl_prompt(&request), &mut memory, &mut constraints, &mut ctx).unwrap();
    assert!(constraints.is_degraded(spec.env_id()));
    assert!(!constraints.is_degraded(other.env_id()));
    assert!(memory.entries(spec.env_id()).is_empty());
    assert_eq!(memory.entries(other.env_id()).len(), other_before);
    assert!(report.checks["eq8"] && report.checks["eq9"]);
    let ratio = report.steps_after_target / report.steps_before_target;
    assert!(ratio >= 1.5, "{ratio}");
    assert_eq!(report.steps_before_other, report.steps_after_other);
}

#[test]
fn report_json_has_one_key_per_check() {
    let spec = fixture();
    let cell = forgettable_cell(&spec);
    let request = UnlearnRequest::states(spec.env_id(), [cell]).unwrap();
    let target = EvalEnv::new(spec.clone(), crossing_pairs(&spec, cell).into_iter().take(2).collect());
    let mut backend = ScriptedBackend::new(5);
    let mut ctx = VerifyContext {
        target: &target,
        others: &[],
        backend: &mut backend,
        options: options(1),
    };
    let report = execute_unlearning(&request, &nl_prompt(&request), &mut MemoryStore::new(), &mut ConstraintSet::new(), &mut ctx).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(v["eq2"], true);
    assert_eq!(v["eq3"], true);
    assert!(v.get("eq5").is_none());
}

fn small_grid() -> impl proptest::strategy::Strategy<Value = GridSpec> {
    (any::<u64>(), 4usize..=8, 4usize..=8).prop_filter_map("infeasible layout", |(seed, w, h)| {
        generate(seed, w, h, w * h / 6, 2).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Wherever the unconstrained agent never touches the forgotten cells,
    /// the constrained agent behaves identically.
    #[test]
    fn untouched_behavior_is_preserved(spec in small_grid(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..3)) {
        let free: Vec<Coord> = spec.free_cells().collect();
        let forbidden: BTreeSet<Coord> = picks.iter().map(|i| free[i.index(free.len())]).collect();
        let mut constraints = ConstraintSet::new();
        forbidden.iter().for_each(|&c| constraints.forbid_state(spec.env_id(), c));
        for &start in free.iter().filter(|c| !forbidden.contains(c)) {
            for task in [Task { start, objective: Objective::CollectAll }, Task::reach(start, free[free.len() / 2])] {
                let plain = run_task(&spec, &mut ScriptedBackend::new(0), &mut MemoryStore::new(), &ConstraintSet::new(), &task, 100).unwrap();
                if plain.trajectory.positions().any(|p| forbidden.contains(&p)) {
                    continue;
                }
                let shaped = run_task(&spec, &mut ScriptedBackend::new(0), &mut MemoryStore::new(), &constraints, &task, 100).unwrap();
                prop_assert_eq!(&shaped.trajectory, &plain.trajectory);
            }
        }
    }

    #[test]
    fn forgetting_an_environment_costs_steps(seed in 0u64..1000) {
        let spec = generate(seed, 8, 8, 8, 2).unwrap();
        let mut degraded = ConstraintSet::new();
        degraded.degrade(spec.env_id());
        let greedy = run_episode(&spec, &mut ScriptedBackend::new(0), &mut MemoryStore::new(), &ConstraintSet::new(), 400).unwrap();
        prop_assume!(greedy.steps >= 1);
        let budget = 3 * greedy.steps.max(8);
        let mean: f64 = (0..20u64)
            .map(|k| run_episode(&spec, &mut ScriptedBackend::new(seed * 100 + k), &mut MemoryStore::new(), &degraded, budget).unwrap().steps as f64)
            .sum::<f64>() / 20.0;
        prop_assert!(mean > greedy.steps as f64, "{} vs {}", mean, greedy.steps);
    }
}

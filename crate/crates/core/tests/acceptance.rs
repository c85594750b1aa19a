//! End-to-end acceptance criteria. Runs without the libtest harness and
//! prints one PASS/FAIL line per criterion; exits nonzero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use agent_unlearn::agent::MemoryStore;
use agent_unlearn::conversion::{certify, iteration_bound, reference_solve, run_radius, softmax, train, TrainConfig};
use agent_unlearn::experiment::{run_experiment, write_artifacts, ExperimentConfig, ExperimentOutcome};
use agent_unlearn::grid::Coord;
use agent_unlearn::unlearning::{Scenario, ScenarioKind, Strategy, VerifyOptions};

mod common;
use common::{fd_gradient, fd_hessian, jacobi_min_eigenvalue, random_fixture, soft_instance, tilt_instance};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn config(kind: ScenarioKind, strategy: Strategy, attacks: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.scenario.kind = kind;
    c.strategy = strategy;
    c.run_attacks = attacks;
    c
}

fn run(c: &ExperimentConfig) -> ExperimentOutcome {
    run_experiment(c, 1).unwrap_or_else(|e| panic!("experiment failed: {e}"))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn in_range(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo && x <= hi
}

fn forgotten_cells(o: &agent_unlearn::experiment::GridOutcome) -> BTreeSet<Coord> {
    match &o.request.scenario {
        Scenario::States(cells) => cells.clone(),
        _ => BTreeSet::new(),
    }
}

fn c1(state: &ExperimentOutcome, seconds: f64) -> Verdict {
    let m = &state.metrics;
    let mut visits = 0u64;
    let mut hits = 0usize;
    let mut eq2 = true;
    let mut eq3 = true;
    let mut preserved = true;
    for g in &state.grids {
        for c in forgotten_cells(g) {
            visits += g.heatmap[c.0][c.1];
        }
        hits += g.report.target_hits;
        eq2 &= g.report.checks.get("eq2") == Some(&true);
        eq3 &= g.report.checks.get("eq3") == Some(&true);
        preserved &= g.report.success_before == g.report.success_after;
    }
    verdict(
        m.unlearn_efficacy == 1.0 && m.unlearn_at_1 >= 0.95 && visits == 0 && hits == 0 && eq2 && eq3 && preserved && seconds < 30.0,
        format!(
            "efficacy {:.3}, unlearn@1 {:.3}, S_u visits {visits} (heatmaps) / {hits} (verification), success preserved {preserved}, {seconds:.1}s",
            m.unlearn_efficacy, m.unlearn_at_1
        ),
    )
}

fn c2(state: &ExperimentOutcome, env: &ExperimentOutcome) -> Verdict {
    let st = state.target_step_ratio();
    let so = state.other_step_ratio().unwrap_or(f64::NAN);
    let et = env.target_step_ratio();
    let eo = env.other_step_ratio().unwrap_or(f64::NAN);
    verdict(
        in_range(st, 1.0, 1.5) && in_range(so, 0.95, 1.05) && et >= 1.5 && in_range(eo, 0.95, 1.05),
        format!("state target {st:.3}, state other {so:.3}, environment target {et:.3}, environment other {eo:.3}"),
    )
}

fn c3(nl: f64, code: f64, example: f64) -> Verdict {
    verdict(
        nl >= code && code >= example && (nl > code || code > example),
        format!("efficacy nl {nl:.3} >= code {code:.3} >= example {example:.3}"),
    )
}

fn c4() -> Verdict {
    let mut worst_g = 0.0f64;
    let mut worst_h = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for seed in 0..20 {
        let (obj, phi) = random_fixture(1000 + seed, 6, 32, seed % 2 == 1);
        let g = obj.gradient(&phi);
        worst_g = worst_g.max((&g - fd_gradient(&obj, &phi, 1e-5)).norm() / g.norm().max(1e-12));
        let h = obj.hessian(&phi);
        worst_h = worst_h.max((&h - fd_hessian(&obj, &phi, 1e-5)).amax());
        worst_sym = worst_sym.max((&h - h.transpose()).amax());
        min_eig = min_eig.min(jacobi_min_eigenvalue(h));
    }
    verdict(
        worst_g <= 1e-6 && worst_h <= 1e-5 && worst_sym == 0.0 && min_eig >= -1e-12,
        format!("gradient rel err {worst_g:.2e}, hessian err {worst_h:.2e}, asymmetry {worst_sym:.1e}, min eigenvalue {min_eig:.2e}"),
    )
}

fn c5() -> Verdict {
    let started = Instant::now();
    let obj = soft_instance(11);
    let start = obj.phi_base().clone();
    let c = certify(&obj, run_radius(&obj, &start)).unwrap();
    let (_, l_star) = reference_solve(&obj, &start).expect("finite minimizer");
    let gap0 = obj.loss(&start) - l_star;
    let Some(bound) = iteration_bound(c.contraction_bound, gap0, 1e-8) else {
        return verdict(false, format!("not strongly convex: alpha {}", c.alpha));
    };
    let out = train(&obj, &start, c.eta, &TrainConfig { eta: Some(c.eta), max_iters: bound, tol: 0.0 }).unwrap();
    let worst = out.trace.iter().filter_map(|r| r.gap_ratio).fold(0.0, f64::max);
    let reached = out.trace.iter().find(|r| r.loss - l_star < 1e-8).map(|r| r.iter);
    let seconds = started.elapsed().as_secs_f64();
    verdict(
        c.strongly_convex && worst <= 1.0 - c.eta * c.alpha + 1e-3 && reached.is_some_and(|it| it <= bound) && seconds < 5.0,
        format!(
            "max gap ratio {worst:.6} vs 1 - eta alpha = {:.6}, gap < 1e-8 at iteration {reached:?} of bound {bound}, {seconds:.2}s",
            1.0 - c.eta * c.alpha
        ),
    )
}

fn c6() -> Verdict {
    let (obj, q) = tilt_instance(6, 8);
    let c = certify(&obj, 0.0).unwrap();
    let out = train(&obj, obj.phi_base(), c.eta, &TrainConfig { eta: None, max_iters: 20_000, tol: 1e-12 }).unwrap();
    // Closed form computed here: pi_base e^Q / Z.
    let base = softmax(obj.phi_base().as_slice());
    let unnorm: Vec<f64> = base.iter().zip(&q).map(|(b, q)| b * q.exp()).collect();
    let z: f64 = unnorm.iter().sum();
    let trained = softmax(out.phi.as_slice());
    let tv = 0.5 * trained.iter().zip(&unnorm).map(|(p, u)| (p - u / z).abs()).sum::<f64>();
    let mut cal = 0.0f64;
    for (s, z) in obj.samples().iter().zip(obj.margins(&out.phi)) {
        cal = cal.max((1.0 / (1.0 + (-z).exp()) - s.target).abs());
    }
    verdict(tv <= 1e-3 && cal <= 1e-6, format!("TV {tv:.2e}, max calibration error {cal:.2e}"))
}

fn inference_summary(o: &ExperimentOutcome) -> (f64, f64, usize) {
    let attacks = o.attacks();
    let pre = mean(attacks.iter().map(|a| a.pre_traversal_prob.unwrap_or(0.0)));
    let close = attacks
        .iter()
        .filter(|a| (a.report.traversal_prob - a.report.reference_prob).abs() <= 0.05)
        .count();
    (pre, close as f64 / attacks.len() as f64, attacks.len())
}

fn c7(state: &ExperimentOutcome, route: &ExperimentOutcome) -> Verdict {
    let (sp, sc, sn) = inference_summary(state);
    let (rp, rc, rn) = inference_summary(route);
    verdict(
        sp >= 0.9 && sc >= 0.95 && rp >= 0.9 && rc >= 0.95 && sn == 50 && rn == 50,
        format!("state: pre {sp:.3}, |dp| <= 0.05 on {sc:.2} of {sn}; route: pre {rp:.3}, |dp| <= 0.05 on {rc:.2} of {rn}"),
    )
}

fn c8(env: &ExperimentOutcome) -> Verdict {
    let attacks = env.attacks();
    let pre = mean(attacks.iter().map(|a| a.pre_reconstruction.unwrap_or(0.0)));
    let un = mean(attacks.iter().map(|a| a.report.reconstruction_success_rate.unwrap_or(1.0)));
    let reference = mean(attacks.iter().map(|a| a.reference_reconstruction.unwrap_or(0.0)));
    verdict(
        pre >= 0.9 && un <= reference + 0.10 && !attacks.is_empty(),
        format!("pre {pre:.3}, unlearned {un:.3}, never-seen {reference:.3}"),
    )
}

fn c9(state: &ExperimentOutcome) -> Verdict {
    let attacks = state.attacks();
    let worst = attacks.iter().map(|a| a.report.kl_estimate.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let within = attacks
        .iter()
        .all(|a| a.report.kl_estimate.unwrap_or(f64::INFINITY) <= a.report.kl_bound.unwrap_or(f64::NEG_INFINITY) + 1e-12);
    let eps = attacks.iter().map(|a| a.eps_reward).fold(0.0, f64::max);
    verdict(
        worst <= 0.05 && within && !attacks.is_empty(),
        format!("max KL {worst:.4}, every KL <= L_lip * eps_reward: {within} (max eps_reward {eps:.2e}, L_lip {})", state.config.l_lip),
    )
}

fn c10() -> Verdict {
    let efficacy = |m: usize| {
        mean((1..=20).map(|seed| {
            let mut c = config(ScenarioKind::State, Strategy::Example, false);
            c.seed = seed;
            c.m = m;
            c.grids.count = 10;
            c.training_grids = 20;
            c.verify = VerifyOptions { trials: 1, ..VerifyOptions::default() };
            run(&c).metrics.unlearn_efficacy
        }))
    };
    let (e1, e3, e5) = (efficacy(1), efficacy(3), efficacy(5));
    verdict(e1 < e3 && e3 <= e5, format!("mean efficacy m=1 {e1:.3}, m=3 {e3:.3}, m=5 {e5:.3}"))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn c11() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let mut c = config(ScenarioKind::State, Strategy::NaturalLanguage, true);
    c.grids.count = 8;
    c.training_grids = 8;
    let mut outputs = Vec::new();
    for (name, jobs) in [("a", 1), ("b", 1), ("c", 2)] {
        let dir = root.path().join(name);
        let outcome = run_experiment(&c, jobs).unwrap();
        write_artifacts(&outcome, &dir).unwrap();
        outputs.push((csv_files(&dir), outcome));
    }
    let identical = outputs.windows(2).all(|w| w[0].0 == w[1].0);
    let files = outputs[0].0.len();
    let mut round_trips = 0;
    for g in &outputs[0].1.grids {
        let text = g.memory.to_json();
        let back = MemoryStore::from_json(&text).unwrap();
        if back == g.memory && back.to_json() == text {
            round_trips += 1;
        }
    }
    let grids = outputs[0].1.grids.len();
    verdict(
        identical && files >= 3 && round_trips == grids,
        format!("{files} CSV files byte-identical across 3 runs (jobs 1, 1, 2): {identical}; memory round trips {round_trips}/{grids}"),
    )
}

fn report(results: &mut Vec<(String, bool)>, id: &str, name: &str, v: Verdict) {
    println!("{} {id} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    results.push((id.to_string(), v.pass));
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters pass arguments; honor a filter that
    // excludes this target.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut results = Vec::new();

    let started = Instant::now();
    let state = run(&config(ScenarioKind::State, Strategy::NaturalLanguage, true));
    let state_secs = started.elapsed().as_secs_f64();
    report(&mut results, "C1", "state unlearning", c1(&state, state_secs));

    let env = run(&config(ScenarioKind::Environment, Strategy::NaturalLanguage, true));
    report(&mut results, "C2", "step inflation", c2(&state, &env));

    let code = run(&config(ScenarioKind::State, Strategy::Code, false)).metrics.unlearn_efficacy;
    let example = run(&config(ScenarioKind::State, Strategy::Example, false)).metrics.unlearn_efficacy;
    report(&mut results, "C3", "strategy ordering", c3(state.metrics.unlearn_efficacy, code, example));

    report(&mut results, "C4", "derivatives", c4());
    report(&mut results, "C5", "linear convergence", c5());
    report(&mut results, "C6", "tilt and calibration", c6());

    let route = run(&config(ScenarioKind::Trajectory, Strategy::NaturalLanguage, true));
    report(&mut results, "C7", "inference attack", c7(&state, &route));
    report(&mut results, "C8", "reconstruction attack", c8(&env));
    report(&mut results, "C9", "behavioral KL", c9(&state));
    report(&mut results, "C10", "m ablation", c10());
    report(&mut results, "C11", "determinism and persistence", c11());

    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed ({:.0}s)",
        results.len() - failed.len(),
        failed.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

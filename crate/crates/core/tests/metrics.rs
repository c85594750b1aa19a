use std::collections::BTreeSet;

use proptest::prelude::*;

use agent_unlearn::agent::{run_task, ConstraintSet, MemoryStore, ScriptedBackend, Task};
use agent_unlearn::grid::{generate, step, Action, AgentState, Coord, GridSpec, Trajectory};
use agent_unlearn::metrics::{compute_metrics, heatmap, write_heatmap_csv, write_metrics_csv, MetricsError, TaskRecord};
use agent_unlearn::plan::Objective;

fn record(attempts: &[bool]) -> TaskRecord {
    TaskRecord {
        attempts: attempts.to_vec(),
        success_before: 1.0,
        success_after: 1.0,
        steps_before: 8.0,
        steps_after_target: 9.0,
        steps_after_other: Some(8.0),
    }
}

fn walk(spec: &GridSpec, from: Coord, actions: &[Action]) -> Trajectory {
    let mut t = Trajectory::starting_at(AgentState::at(from));
    for &a in actions {
        let out = step(spec, &t.last, a).unwrap();
        t.pairs.push((t.last.clone(), a));
        t.last = out.next_state;
    }
    t
}

#[test]
fn all_first_attempt_successes() {
    let row = compute_metrics("nl", &vec![record(&[true]); 10]).unwrap();
    assert_eq!((row.unlearn_efficacy, row.unlearn_at_1), (1.0, 1.0));
}

#[test]
fn late_successes_count_for_efficacy_only() {
    let mut records = vec![record(&[true]); 7];
    records.push(record(&[false, true]));
    records.push(record(&[false, false, false, false, true]));
    records.push(record(&[false; 5]));
    let row = compute_metrics("code", &records).unwrap();
    assert!((row.unlearn_at_1 - 0.7).abs() < 1e-12);
    assert!((row.unlearn_efficacy - 0.9).abs() < 1e-12);
    assert_eq!(row.steps_after_target, 9.0);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(matches!(compute_metrics("nl", &[]), Err(MetricsError::Empty)));
    assert!(matches!(compute_metrics("nl", &[record(&[])]), Err(MetricsError::Attempts(0, 0))));
    assert!(matches!(compute_metrics("nl", &[record(&[true]), record(&[false; 6])]), Err(MetricsError::Attempts(1, 6))));
}

#[test]
fn empty_heatmap_is_zero() {
    let spec = generate(42, 8, 8, 10, 3).unwrap();
    let h = heatmap(&[], &spec).unwrap();
    assert_eq!(h, vec![vec![0; 8]; 8]);
}

#[test]
fn straight_line_heatmap() {
    let spec = GridSpec::from_text("line", "S....\n.....\n....T").unwrap();
    let t = walk(&spec, Coord(1, 0), &[Action::Right; 4]);
    let h = heatmap(&[t], &spec).unwrap();
    assert_eq!(h, vec![vec![0; 5], vec![1; 5], vec![0; 5]]);
}

#[test]
fn unlearned_rollouts_never_light_up_the_target() {
    let spec = generate(42, 8, 8, 10, 3).unwrap();
    let cell = Coord(4, 5);
    let mut constraints = ConstraintSet::new();
    constraints.forbid_state(spec.env_id(), cell);
    let free: Vec<Coord> = spec.free_cells().filter(|&c| c != cell).collect();
    let mut trajectories = Vec::new();
    for i in 0..100 {
        let start = free[i % free.len()];
        let task = if i % 2 == 0 { Task { start, objective: Objective::CollectAll } } else { Task::reach(start, free[(7 * i) % free.len()]) };
        let ep = run_task(&spec, &mut ScriptedBackend::new(i as u64), &mut MemoryStore::new(), &constraints, &task, 200).unwrap();
        trajectories.push(ep.trajectory);
    }
    let h = heatmap(&trajectories, &spec).unwrap();
    assert_eq!(h[cell.0][cell.1], 0);
    // Scan oracle.
    assert!(trajectories.iter().all(|t| t.positions().all(|p| p != cell)));
}

#[test]
fn metrics_csv_layout() {
    let row = compute_metrics("example", &[record(&[false, true]), record(&[true])]).unwrap();
    let mut buf = Vec::new();
    write_metrics_csv(&[row], &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "method,unlearn_efficacy,unlearn_at_1,success_before,success_after,steps_before,steps_after_target,steps_after_other\n\
         example,1.000000,0.500000,1.000000,1.000000,8.000000,9.000000,8.000000\n"
    );
}

#[test]
fn heatmap_csv_layout() {
    let mut buf = Vec::new();
    write_heatmap_csv(&[vec![0, 1, 2], vec![10, 0, 3]], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "0,1,2\n10,0,3\n");
}

proptest! {
    #[test]
    fn first_attempt_rate_never_exceeds_efficacy(logs in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..=5), 1..40)) {
        let records: Vec<TaskRecord> = logs.iter().map(|l| record(l)).collect();
        let row = compute_metrics("x", &records).unwrap();
        prop_assert!(row.unlearn_at_1 <= row.unlearn_efficacy);
        prop_assert!((0.0..=1.0).contains(&row.unlearn_efficacy));
        let oracle = logs.iter().filter(|l| l.contains(&true)).count() as f64 / logs.len() as f64;
        prop_assert!((row.unlearn_efficacy - oracle).abs() < 1e-12);
    }

    #[test]
    fn heatmap_sums_to_visits(seed in 0u64..500, walks in prop::collection::vec(prop::collection::vec(0usize..4, 0..30), 0..6)) {
        let spec = generate(seed, 6, 6, 6, 2).unwrap();
        let free: Vec<Coord> = spec.free_cells().collect();
        let trajectories: Vec<Trajectory> = walks
            .iter()
            .enumerate()
            .map(|(i, w)| walk(&spec, free[i % free.len()], &w.iter().map(|&a| Action::ALL[a]).collect::<Vec<_>>()))
            .collect();
        let h = heatmap(&trajectories, &spec).unwrap();
        let total: u64 = h.iter().flatten().sum();
        prop_assert_eq!(total, trajectories.iter().map(|t| t.len() as u64 + 1).sum::<u64>());
        let obstacles: BTreeSet<Coord> = spec.obstacles().collect();
        for c in obstacles {
            prop_assert_eq!(h[c.0][c.1], 0);
        }
    }
}

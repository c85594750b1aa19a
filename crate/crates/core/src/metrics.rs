//! Unlearning metrics, result tables and visitation heatmaps.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{GridSpec, Trajectory};

/// Attempts counted toward efficacy.
pub const MAX_ATTEMPTS: usize = 5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no task records")]
    Empty,
    #[error("task {0} has {1} attempts; expected 1 to {MAX_ATTEMPTS}")]
    Attempts(usize, usize),
    #[error("trajectory leaves the grid at {0}")]
    Trajectory(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Outcome of one unlearning task: the verified result of each attempt and
/// the behavior measured before and after.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub attempts: Vec<bool>,
    pub success_before: f64,
    pub success_after: f64,
    pub steps_before: f64,
    pub steps_after_target: f64,
    pub steps_after_other: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: String,
    pub unlearn_efficacy: f64,
    pub unlearn_at_1: f64,
    pub success_before: f64,
    pub success_after: f64,
    pub steps_before: f64,
    pub steps_after_target: f64,
    pub steps_after_other: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Efficacy is the share of tasks with a verified success within the
/// attempts, Unlearn@1 the share that succeeded on the first one. The other
/// columns average the per-task measurements.
pub fn compute_metrics(method: &str, records: &[TaskRecord]) -> Result<MetricsRow, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, r) in records.iter().enumerate() {
        if r.attempts.is_empty() || r.attempts.len() > MAX_ATTEMPTS {
            return Err(MetricsError::Attempts(i, r.attempts.len()));
        }
    }
    let frac = |f: &dyn Fn(&TaskRecord) -> bool| {
        records.iter().filter(|r| f(r)).count() as f64 / records.len() as f64
    };
    Ok(MetricsRow {
        method: method.to_string(),
        unlearn_efficacy: frac(&|r| r.attempts.iter().any(|&ok| ok)),
        unlearn_at_1: frac(&|r| r.attempts[0]),
        success_before: mean(records.iter().map(|r| r.success_before)),
        success_after: mean(records.iter().map(|r| r.success_after)),
        steps_before: mean(records.iter().map(|r| r.steps_before)),
        steps_after_target: mean(records.iter().map(|r| r.steps_after_target)),
        steps_after_other: mean(records.iter().filter_map(|r| r.steps_after_other)),
    })
}

/// Per-cell visit counts, including every trajectory's final cell.
pub fn heatmap(trajectories: &[Trajectory], spec: &GridSpec) -> Result<Vec<Vec<u64>>, MetricsError> {
    let mut counts = vec![vec![0u64; spec.width()]; spec.height()];
    for t in trajectories {
        for p in t.positions() {
            if !spec.is_free(p) {
                return Err(MetricsError::Trajectory(p.to_string()));
            }
            counts[p.0][p.1] += 1;
        }
    }
    Ok(counts)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "unlearn_efficacy",
        "unlearn_at_1",
        "success_before",
        "success_after",
        "steps_before",
        "steps_after_target",
        "steps_after_other",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            fmt(r.unlearn_efficacy),
            fmt(r.unlearn_at_1),
            fmt(r.success_before),
            fmt(r.success_after),
            fmt(r.steps_before),
            fmt(r.steps_after_target),
            fmt(r.steps_after_other),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Row-major matrix of comma-separated integers.
pub fn write_heatmap_csv<W: Write>(counts: &[Vec<u64>], out: W) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in counts {
        w.write_record(row.iter().map(u64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(attempts: &[bool]) -> TaskRecord {
        TaskRecord {
            attempts: attempts.to_vec(),
            success_before: 1.0,
            success_after: 1.0,
            steps_before: 10.0,
            steps_after_target: 12.0,
            steps_after_other: None,
        }
    }

    #[test]
    fn counting() {
        let mut records = vec![rec(&[true]); 7];
        records.push(rec(&[false, true]));
        records.push(rec(&[false, false, false, false, true]));
        records.push(rec(&[false; 5]));
        let row = compute_metrics("nl", &records).unwrap();
        assert!((row.unlearn_at_1 - 0.7).abs() < 1e-12);
        assert!((row.unlearn_efficacy - 0.9).abs() < 1e-12);
        assert!(row.steps_after_other.is_nan());
    }

    #[test]
    fn attempt_bounds() {
        assert!(matches!(compute_metrics("x", &[]), Err(MetricsError::Empty)));
        assert!(matches!(
            compute_metrics("x", &[rec(&[false; 6])]),
            Err(MetricsError::Attempts(0, 6))
        ));
    }
}

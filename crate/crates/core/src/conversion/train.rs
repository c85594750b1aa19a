//! Plain gradient descent on the preference loss.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversion::objective::PreferenceObjective;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("non-finite loss at iteration {0}")]
    Numeric(usize),
    #[error("loss increased at iteration {iter}: {before} -> {after}")]
    NotMonotone { iter: usize, before: f64, after: f64 },
    #[error("step size {0} must be positive and finite")]
    StepSize(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Step size. `None` uses the certified step.
    pub eta: Option<f64>,
    pub max_iters: usize,
    /// Stop once the gradient norm falls to this value.
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: None,
            max_iters: 500,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// `(L_t - L*) / (L_{t-1} - L*)`, when the previous gap is measurable.
    pub gap_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub phi: DVector<f64>,
    pub trace: Vec<TraceRow>,
    /// Reference minimum used for gap ratios.
    pub l_star: Option<f64>,
}

/// Gaps below this are dominated by rounding in `L*` and are not used for
/// ratios.
pub const GAP_FLOOR: f64 = 1e-12;

/// Damped Newton solve used as the reference minimizer. Singular directions
/// (where the loss is flat) are handled with a pseudo-inverse. Returns `None`
/// when no finite minimizer is found, e.g. on separable hard-label data.
pub fn reference_solve(
    objective: &PreferenceObjective,
    start: &DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let mut phi = start.clone();
    let mut loss = objective.loss(&phi);
    for _ in 0..200 {
        let g = objective.gradient(&phi);
        if g.norm() <= 1e-15 {
            break;
        }
        let h = objective.hessian(&phi);
        let svd = h.svd(true, true);
        let cutoff = svd.singular_values.max() * 1e-13;
        let dir = svd.solve(&(-&g), cutoff).ok()?;
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand = &phi + &dir * t;
            let l = objective.loss(&cand);
            if l <= loss + 1e-4 * t * g.dot(&dir) {
                phi = cand;
                loss = l;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let gnorm = objective.gradient(&phi).norm();
    (gnorm <= 1e-9 && loss.is_finite()).then_some((phi, loss))
}

/// Runs gradient descent from `start` with step `eta`. The trace holds the
/// loss before any step (iteration 0) and after each step.
pub fn train(
    objective: &PreferenceObjective,
    start: &DVector<f64>,
    eta: f64,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(TrainError::StepSize(eta));
    }
    let mut phi = start.clone();
    let mut loss = objective.loss(&phi);
    if !loss.is_finite() {
        return Err(TrainError::Numeric(0));
    }
    let mut grad = objective.gradient(&phi);
    let mut trace = vec![TraceRow {
        iter: 0,
        loss,
        grad_norm: grad.norm(),
        gap_ratio: None,
    }];
    for iter in 1..=config.max_iters {
        if grad.norm() <= config.tol {
            break;
        }
        phi.axpy(-eta, &grad, 1.0);
        let next = objective.loss(&phi);
        if !next.is_finite() || phi.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Numeric(iter));
        }
        if next > loss + 1e-12 * loss.abs().max(1.0) {
            return Err(TrainError::NotMonotone {
                iter,
                before: loss,
                after: next,
            });
        }
        loss = next;
        grad = objective.gradient(&phi);
        trace.push(TraceRow {
            iter,
            loss,
            grad_norm: grad.norm(),
            gap_ratio: None,
        });
    }
    let l_star = reference_solve(objective, &phi).map(|(_, l)| l.min(loss));
    if let Some(ls) = l_star {
        for i in 1..trace.len() {
            let prev = trace[i - 1].loss - ls;
            if prev > GAP_FLOOR {
                trace[i].gap_ratio = Some((trace[i].loss - ls) / prev);
            }
        }
    }
    Ok(TrainOutcome { phi, trace, l_star })
}

/// Writes `iter,loss,grad_norm,gap_ratio` rows.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "loss", "grad_norm", "gap_ratio"])?;
    for row in trace {
        w.write_record([
            row.iter.to_string(),
            format!("{:.12e}", row.loss),
            format!("{:.12e}", row.grad_norm),
            row.gap_ratio.map(|r| format!("{r:.12e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

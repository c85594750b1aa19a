//! Numerical checks behind `agent-unlearn certify`: derivative agreement,
//! the contraction certificate on a synthetic instance, and the tilt of an
//! exactly trained policy.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conversion::{
    certify, closed_form_optimum, iteration_bound, run_radius, sigmoid, softmax, synth_preferences,
    total_variation, train, Certificates, PairSample, PreferenceMode, PreferenceObjective,
    TrainConfig,
};
use crate::experiment::ExperimentError;

/// Strongly convex preference objective in `d` dimensions: `n` random
/// feature differences of norm at most 1 with soft targets in
/// `[0.25, 0.75]`, so a finite minimizer exists.
pub fn synthetic_instance(seed: u64, d: usize, n: usize, beta: f64) -> PreferenceObjective {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi_base = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
    let samples = (0..n)
        .map(|_| {
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let v = if v.norm() > 1.0 { v.normalize() } else { v };
            PairSample::weighted(v, rng.random_range(0.25..0.75))
        })
        .collect();
    PreferenceObjective::new(beta, phi_base, samples).expect("valid synthetic instance")
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeCheck {
    pub fixtures: usize,
    pub max_gradient_rel_error: f64,
    pub max_hessian_abs_error: f64,
    pub hessian_symmetric_psd: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionCheck {
    pub certificates: Certificates,
    pub max_gap_ratio: f64,
    pub iteration_bound: usize,
    pub iterations_to_tolerance: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltCheck {
    pub total_variation: f64,
    pub max_calibration_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub derivatives: DerivativeCheck,
    pub contraction: ContractionCheck,
    pub tilt: TiltCheck,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.derivatives.max_gradient_rel_error <= 1e-6
            && self.derivatives.max_hessian_abs_error <= 1e-5
            && self.derivatives.hessian_symmetric_psd
            && self.contraction.passed
            && self.tilt.passed
    }
}

fn derivative_check(seed: u64) -> DerivativeCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut g_err, mut h_err, mut ok) = (0.0f64, 0.0f64, true);
    let fixtures = 20;
    for i in 0..fixtures {
        let d = 2 + i % 5;
        let obj = synthetic_instance(rng.random(), d, 12, rng.random_range(0.5..2.0));
        let phi = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let g = obj.gradient(&phi);
        let h = obj.hessian(&phi);
        let step = 1e-5;
        let mut fd_g = DVector::zeros(d);
        for k in 0..d {
            let mut e = DVector::zeros(d);
            e[k] = step;
            fd_g[k] = (obj.loss(&(&phi + &e)) - obj.loss(&(&phi - &e))) / (2.0 * step);
            let col = (obj.gradient(&(&phi + &e)) - obj.gradient(&(&phi - &e))) / (2.0 * step);
            for r in 0..d {
                h_err = h_err.max((col[r] - h[(r, k)]).abs());
            }
        }
        g_err = g_err.max((&fd_g - &g).norm() / g.norm().max(1e-12));
        let sym = (&h - h.transpose()).amax() <= 1e-12;
        ok &= sym && h.symmetric_eigenvalues().min() >= -1e-12;
    }
    DerivativeCheck {
        fixtures,
        max_gradient_rel_error: g_err,
        max_hessian_abs_error: h_err,
        hessian_symmetric_psd: ok,
    }
}

fn contraction_check(seed: u64) -> Result<ContractionCheck, ExperimentError> {
    let fail = |e: &dyn std::fmt::Display| ExperimentError::Failed(e.to_string());
    let obj = synthetic_instance(seed, 4, 40, 1.0);
    let start = obj.phi_base().clone();
    let certs = certify(&obj, run_radius(&obj, &start)).map_err(|e| fail(&e))?;
    let first = train(&obj, &start, certs.eta, &TrainConfig { eta: None, max_iters: 0, tol: 0.0 })
        .map_err(|e| fail(&e))?;
    let l_star = first
        .l_star
        .ok_or_else(|| ExperimentError::Failed("synthetic instance has no minimizer".into()))?;
    let gap0 = first.trace[0].loss - l_star;
    let bound = iteration_bound(certs.contraction_bound, gap0, 1e-8)
        .ok_or_else(|| ExperimentError::Failed("instance is not strongly convex".into()))?;
    let config = TrainConfig {
        eta: Some(certs.eta),
        max_iters: bound,
        tol: 0.0,
    };
    let out = train(&obj, &start, certs.eta, &config).map_err(|e| fail(&e))?;
    let max_ratio = out
        .trace
        .iter()
        .filter_map(|r| r.gap_ratio)
        .fold(0.0, f64::max);
    let reached = out.trace.iter().find(|r| r.loss - l_star < 1e-8).map(|r| r.iter);
    let passed = certs.strongly_convex
        && max_ratio <= certs.contraction_bound + 1e-3
        && reached.is_some_and(|it| it <= bound);
    Ok(ContractionCheck {
        certificates: certs,
        max_gap_ratio: max_ratio,
        iteration_bound: bound,
        iterations_to_tolerance: reached,
        passed,
    })
}

/// Trains one-hot template logits on the exact expected loss over all pairs
/// of a bank of 8 and compares with `pi_base e^Q / Z`.
fn tilt_check(seed: u64) -> Result<TiltCheck, ExperimentError> {
    let fail = |e: &dyn std::fmt::Display| ExperimentError::Failed(e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let beta = 1.0;
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let base_logits = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let samples: Vec<PairSample> = synth_preferences(&q, beta, PreferenceMode::Exact)
        .into_iter()
        .map(|p| {
            let mut d = DVector::zeros(n);
            d[p.preferred] = 1.0;
            d[p.dispreferred] = -1.0;
            PairSample::weighted(d, p.weight)
        })
        .collect();
    let obj = PreferenceObjective::new(beta, base_logits.clone(), samples).map_err(|e| fail(&e))?;
    let certs = certify(&obj, 0.0).map_err(|e| fail(&e))?;
    let config = TrainConfig {
        eta: None,
        max_iters: 20_000,
        tol: 1e-12,
    };
    let out = train(&obj, &base_logits, certs.eta, &config).map_err(|e| fail(&e))?;
    let base = softmax(base_logits.as_slice());
    let trained = softmax(out.phi.as_slice());
    let tv = total_variation(&trained, &closed_form_optimum(&base, &q));
    let shift = &out.phi - &base_logits;
    let mut cal = 0.0f64;
    for a in 0..n {
        for b in (a + 1)..n {
            let p_star = sigmoid(beta * (q[a] - q[b]));
            cal = cal.max((sigmoid(beta * (shift[a] - shift[b])) - p_star).abs());
        }
    }
    Ok(TiltCheck {
        total_variation: tv,
        max_calibration_error: cal,
        passed: tv <= 1e-3 && cal <= 1e-6,
    })
}

pub fn run_theory_checks(seed: u64) -> Result<TheoryReport, ExperimentError> {
    Ok(TheoryReport {
        derivatives: derivative_check(seed),
        contraction: contraction_check(seed)?,
        tilt: tilt_check(seed)?,
    })
}

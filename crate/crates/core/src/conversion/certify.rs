//! Smoothness, strong-convexity and step-size certificates for the
//! preference loss.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::conversion::objective::{sigmoid, PreferenceObjective};
use crate::conversion::train::reference_solve;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("every feature difference is zero")]
    Degenerate,
    #[error("parameter radius {0} must be finite and non-negative")]
    Radius(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificates {
    /// Largest feature-difference norm in the data.
    #[serde(rename = "B")]
    pub b: f64,
    /// Smoothness constant `beta^2 B^2 / 4`.
    #[serde(rename = "L_s")]
    pub l_s: f64,
    /// Smallest eigenvalue of the mean `dpsi dpsi^T`.
    pub mu: f64,
    /// Lower bound on `s(z) s(-z)` over the parameter ball.
    pub eps_sigma: f64,
    pub alpha: f64,
    pub eta: f64,
    pub contraction_bound: f64,
    /// Radius of the ball around `phi_base` the bound covers.
    pub radius: f64,
    pub strongly_convex: bool,
}

/// Certificates valid for every `phi` with `|phi - phi_base| <= radius`.
pub fn certify(objective: &PreferenceObjective, radius: f64) -> Result<Certificates, CertifyError> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(CertifyError::Radius(radius));
    }
    let beta = objective.beta();
    let b = objective
        .samples()
        .iter()
        .map(|s| s.delta_psi.norm())
        .fold(0.0, f64::max);
    if b == 0.0 {
        return Err(CertifyError::Degenerate);
    }
    let l_s = beta * beta * b * b / 4.0;
    let eig = objective.second_moment().symmetric_eigenvalues();
    let scale = eig.amax().max(f64::MIN_POSITIVE);
    let raw_mu = eig.min();
    let strongly_convex = raw_mu > 1e-12 * scale;
    let mu = if strongly_convex { raw_mu } else { 0.0 };
    let z_max = beta * radius * b;
    let eps_sigma = sigmoid(z_max) * sigmoid(-z_max);
    let alpha = beta * beta * eps_sigma * mu;
    let eta = 2.0 / (l_s + alpha);
    Ok(Certificates {
        b,
        l_s,
        mu,
        eps_sigma,
        alpha,
        eta,
        contraction_bound: 1.0 - eta * alpha,
        radius,
        strongly_convex,
    })
}

/// Radius covering every gradient-descent iterate started at `start`:
/// `|phi* - phi_base| + |start - phi*|`, since a step no longer than
/// `2 / L_s` never moves away from the minimizer. Falls back to `|start -
/// phi_base|` when no finite minimizer exists.
pub fn run_radius(objective: &PreferenceObjective, start: &DVector<f64>) -> f64 {
    match reference_solve(objective, start) {
        Some((star, _)) => (&star - objective.phi_base()).norm() + (start - &star).norm(),
        None => (start - objective.phi_base()).norm(),
    }
}

/// Iterations the contraction bound needs to shrink `gap0` below `target`.
pub fn iteration_bound(contraction: f64, gap0: f64, target: f64) -> Option<usize> {
    if gap0 <= target {
        return Some(0);
    }
    if !(contraction > 0.0 && contraction < 1.0) {
        return None;
    }
    Some(((gap0 / target).ln() / -contraction.ln()).ceil() as usize)
}

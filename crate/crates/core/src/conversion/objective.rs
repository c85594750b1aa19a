//! The preference loss and its exact derivatives.
//!
//! For a pair with feature difference `dpsi` and target probability `p`, let
//! `z = beta * (phi - phi_base) . dpsi`. The per-pair loss is
//! `-p ln s(z) - (1 - p) ln s(-z)`, which for a hard label (`p = 1`) is the
//! familiar `-ln s(z)`. Its gradient is `beta (s(z) - p) dpsi` and its
//! Hessian `beta^2 s(z) s(-z) dpsi dpsi^T`, independent of `p`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("the preference dataset is empty")]
    Empty,
    #[error("feature difference has dimension {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("target probability {0} outside [0, 1]")]
    Target(f64),
    #[error("|dpsi| = {norm} exceeds the declared bound {bound}")]
    Bound { norm: f64, bound: f64 },
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-ln s(z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// One training pair: `dpsi = psi(x, y_p) - psi(x, y_q)` and the probability
/// that `y_p` is preferred (1 for an observed label).
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub delta_psi: DVector<f64>,
    pub target: f64,
}

impl PairSample {
    pub fn labeled(delta_psi: DVector<f64>) -> Self {
        Self {
            delta_psi,
            target: 1.0,
        }
    }

    pub fn weighted(delta_psi: DVector<f64>, p_star: f64) -> Self {
        Self {
            delta_psi,
            target: p_star,
        }
    }
}

/// Mean preference loss over a fixed dataset, relative to frozen base
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceObjective {
    beta: f64,
    phi_base: DVector<f64>,
    samples: Vec<PairSample>,
}

impl PreferenceObjective {
    pub fn new(
        beta: f64,
        phi_base: DVector<f64>,
        samples: Vec<PairSample>,
    ) -> Result<Self, ObjectiveError> {
        if samples.is_empty() {
            return Err(ObjectiveError::Empty);
        }
        for s in &samples {
            if s.delta_psi.len() != phi_base.len() {
                return Err(ObjectiveError::Dimension {
                    got: s.delta_psi.len(),
                    expected: phi_base.len(),
                });
            }
            if !(0.0..=1.0).contains(&s.target) {
                return Err(ObjectiveError::Target(s.target));
            }
        }
        Ok(Self {
            beta,
            phi_base,
            samples,
        })
    }

    /// Rejects datasets whose feature differences exceed `bound`.
    pub fn check_bound(&self, bound: f64) -> Result<(), ObjectiveError> {
        for s in &self.samples {
            let norm = s.delta_psi.norm();
            if norm > bound * (1.0 + 1e-12) {
                return Err(ObjectiveError::Bound { norm, bound });
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn phi_base(&self) -> &DVector<f64> {
        &self.phi_base
    }

    pub fn samples(&self) -> &[PairSample] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.phi_base.len()
    }

    /// Per-pair margins `z`.
    pub fn margins(&self, phi: &DVector<f64>) -> Vec<f64> {
        let shift = phi - &self.phi_base;
        self.samples
            .iter()
            .map(|s| self.beta * shift.dot(&s.delta_psi))
            .collect()
    }

    pub fn loss(&self, phi: &DVector<f64>) -> f64 {
        let total: f64 = self
            .margins(phi)
            .into_iter()
            .zip(&self.samples)
            .map(|(z, s)| {
                let mut l = 0.0;
                if s.target > 0.0 {
                    l += s.target * neg_log_sigmoid(z);
                }
                if s.target < 1.0 {
                    l += (1.0 - s.target) * neg_log_sigmoid(-z);
                }
                l
            })
            .sum();
        total / self.samples.len() as f64
    }

    pub fn gradient(&self, phi: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for (z, s) in self.margins(phi).into_iter().zip(&self.samples) {
            g.axpy(self.beta * (sigmoid(z) - s.target), &s.delta_psi, 1.0);
        }
        g / self.samples.len() as f64
    }

    pub fn hessian(&self, phi: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for (z, s) in self.margins(phi).into_iter().zip(&self.samples) {
            let w = self.beta * self.beta * sigmoid(z) * sigmoid(-z);
            h.syger(w, &s.delta_psi, &s.delta_psi, 1.0);
        }
        // syger fills the lower triangle only; mirroring keeps H exactly symmetric.
        h.fill_upper_triangle_with_lower_triangle();
        h / self.samples.len() as f64
    }

    /// Mean of `dpsi dpsi^T`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for s in &self.samples {
            m.syger(1.0, &s.delta_psi, &s.delta_psi, 1.0);
        }
        m.fill_upper_triangle_with_lower_triangle();
        m / self.samples.len() as f64
    }
}

//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agent_unlearn::conversion::{PairSample, PreferenceObjective};

/// Random dataset: `n` differences in `[-1, 1]^d`, hard or soft targets.
pub fn random_fixture(seed: u64, d: usize, n: usize, soft: bool) -> (PreferenceObjective, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let samples = (0..n)
        .map(|_| {
            let dpsi = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            if soft {
                PairSample::weighted(dpsi, rng.random_range(0.2..0.8))
            } else {
                PairSample::labeled(dpsi)
            }
        })
        .collect();
    let beta = rng.random_range(0.5..2.0);
    let phi = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    (PreferenceObjective::new(beta, base, samples).unwrap(), phi)
}

/// `-mean ln s(z)` written out per term from the raw definition.
pub fn loss_term_by_term(obj: &PreferenceObjective, phi: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for s in obj.samples() {
        let mut delta_phi = 0.0;
        let mut delta_base = 0.0;
        for k in 0..phi.len() {
            delta_phi += phi[k] * s.delta_psi[k];
            delta_base += obj.phi_base()[k] * s.delta_psi[k];
        }
        let z = obj.beta() * (delta_phi - delta_base);
        total -= (1.0 / (1.0 + (-z).exp())).ln();
    }
    total / obj.samples().len() as f64
}

pub fn fd_gradient(obj: &PreferenceObjective, phi: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(phi.len(), |k, _| {
        let mut up = phi.clone();
        let mut down = phi.clone();
        up[k] += h;
        down[k] -= h;
        (obj.loss(&up) - obj.loss(&down)) / (2.0 * h)
    })
}

pub fn fd_hessian(obj: &PreferenceObjective, phi: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = phi.len();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut up = phi.clone();
        let mut down = phi.clone();
        up[k] += h;
        down[k] -= h;
        out.set_column(k, &((obj.gradient(&up) - obj.gradient(&down)) / (2.0 * h)));
    }
    out
}

/// Smallest eigenvalue by cyclic Jacobi rotations.
pub fn jacobi_min_eigenvalue(mut a: DMatrix<f64>) -> f64 {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut r = DMatrix::identity(n, n);
                r[(p, p)] = c;
                r[(q, q)] = c;
                r[(p, q)] = s;
                r[(q, p)] = -s;
                a = r.transpose() * &a * &r;
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).fold(f64::INFINITY, f64::min)
}

/// Soft-target instance with a finite minimizer.
pub fn soft_instance(seed: u64) -> PreferenceObjective {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..40)
        .map(|_| {
            let d = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            PairSample::weighted(if d.norm() > 1.0 { d.normalize() } else { d }, rng.random_range(0.25..0.75))
        })
        .collect();
    PreferenceObjective::new(1.0, DVector::zeros(4), samples).unwrap()
}

/// Bank-of-`n` instance over one-hot template logits: exact
/// Bradley-Terry weights for every pair, random base logits and utilities.
pub fn tilt_instance(seed: u64, n: usize) -> (PreferenceObjective, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
    let mut samples = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let mut d = DVector::zeros(n);
            d[a] = 1.0;
            d[b] = -1.0;
            // Bradley-Terry probability written out directly.
            let p = 1.0 / (1.0 + (-(q[a] - q[b])).exp());
            samples.push(PairSample::weighted(d, p));
        }
    }
    (PreferenceObjective::new(1.0, base, samples).unwrap(), q)
}

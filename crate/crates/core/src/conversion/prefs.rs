//! Synthetic Bradley–Terry preferences over a template bank and the
//! closed-form optimum they induce.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conversion::model::softmax;
use crate::conversion::objective::sigmoid;

/// `P(a preferred over b) = s(beta (Q_a - Q_b))`.
pub fn preference_probability(beta: f64, q_a: f64, q_b: f64) -> f64 {
    sigmoid(beta * (q_a - q_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreferenceMode {
    /// `n` labels drawn from uniformly chosen template pairs.
    Sampled { n: usize, seed: u64 },
    /// One weighted entry per unordered pair.
    Exact,
}

/// A preference between two templates. `weight` is the probability that
/// `preferred` wins: the exact `p*` in exact mode, 1 for sampled labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPair {
    pub preferred: usize,
    pub dispreferred: usize,
    pub weight: f64,
}

pub fn synth_preferences(q: &[f64], beta: f64, mode: PreferenceMode) -> Vec<WeightedPair> {
    let n = q.len();
    match mode {
        PreferenceMode::Exact => (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
            .map(|(a, b)| WeightedPair {
                preferred: a,
                dispreferred: b,
                weight: preference_probability(beta, q[a], q[b]),
            })
            .collect(),
        PreferenceMode::Sampled { n: draws, seed } => {
            if n < 2 {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..draws)
                .map(|_| {
                    let a = rng.random_range(0..n);
                    let b = (a + rng.random_range(1..n)) % n;
                    let p = preference_probability(beta, q[a], q[b]);
                    let (w, l) = if rng.random::<f64>() < p { (a, b) } else { (b, a) };
                    WeightedPair {
                        preferred: w,
                        dispreferred: l,
                        weight: 1.0,
                    }
                })
                .collect()
        }
    }
}

/// Normalized `pi_base(y) e^{Q(y)}`.
pub fn closed_form_optimum(base: &[f64], q: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = base.iter().zip(q).map(|(p, q)| p.ln() + q).collect();
    softmax(&logits)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p || q)` in nats; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

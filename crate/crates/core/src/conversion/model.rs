use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversion::features::FeatureMap;
use crate::conversion::objective::{ObjectiveError, PairSample, PreferenceObjective};
use crate::unlearning::templates::{Template, TemplateBank};
use crate::unlearning::{UnlearnPrompt, UnlearnRequest};

/// Bumped whenever template wording changes.
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Linear-feature softmax policy over a template bank:
/// `pi(y | x) ∝ exp(phi . psi(x, y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionModel {
    pub phi: DVector<f64>,
    phi_base: DVector<f64>,
    beta: f64,
    bank: TemplateBank,
    features: FeatureMap,
}

/// `(x, y_p, y_q)` with template ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceTriple {
    pub request: UnlearnRequest,
    pub preferred: usize,
    pub dispreferred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub phi: Vec<f64>,
    pub phi_base: Vec<f64>,
    pub beta: f64,
    pub feature_dimension: usize,
    pub bank_version: u32,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl ConversionModel {
    /// Starts at `phi = phi_base`.
    pub fn new(
        bank: TemplateBank,
        features: FeatureMap,
        beta: f64,
        phi_base: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if bank.is_empty() {
            return Err(ModelError::Config("template bank is empty".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(ModelError::Config(format!("beta must be positive, got {beta}")));
        }
        if phi_base.len() != features.dim() {
            return Err(ModelError::Config(format!(
                "base parameters have dimension {}, features {}",
                phi_base.len(),
                features.dim()
            )));
        }
        Ok(Self {
            phi: phi_base.clone(),
            phi_base,
            beta,
            bank,
            features,
        })
    }

    pub fn phi_base(&self) -> &DVector<f64> {
        &self.phi_base
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn bank(&self) -> &TemplateBank {
        &self.bank
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    pub fn psi(&self, request: &UnlearnRequest, template: &Template) -> DVector<f64> {
        self.features.features(request, template)
    }

    fn policy_for(&self, params: &DVector<f64>, request: &UnlearnRequest) -> Vec<f64> {
        let logits: Vec<f64> = self
            .bank
            .templates
            .iter()
            .map(|t| params.dot(&self.psi(request, t)))
            .collect();
        softmax(&logits)
    }

    /// `pi_phi(. | x)` over the bank.
    pub fn policy(&self, request: &UnlearnRequest) -> Vec<f64> {
        self.policy_for(&self.phi, request)
    }

    /// `pi_base(. | x)` over the bank.
    pub fn base_policy(&self, request: &UnlearnRequest) -> Vec<f64> {
        self.policy_for(&self.phi_base, request)
    }

    /// `m` independent template draws from `pi_phi(. | x)`.
    pub fn sample_prompts(
        &self,
        request: &UnlearnRequest,
        m: usize,
        seed: u64,
    ) -> Result<Vec<usize>, ModelError> {
        if m == 0 {
            return Err(ModelError::Config("m must be at least 1".into()));
        }
        if self.bank.kind != request.kind() {
            return Err(ModelError::Config(format!(
                "bank serves {} requests, got {}",
                self.bank.kind,
                request.kind()
            )));
        }
        let dist = WeightedIndex::new(self.policy(request))
            .map_err(|e| ModelError::Config(format!("degenerate policy: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..m).map(|_| dist.sample(&mut rng)).collect())
    }

    pub fn render(&self, request: &UnlearnRequest, template_id: usize, noise_seed: u64) -> UnlearnPrompt {
        self.bank.templates[template_id].render(request, noise_seed)
    }

    /// Pair samples for a set of triples, checking the declared feature
    /// bound.
    pub fn pair_samples(&self, triples: &[PreferenceTriple]) -> Result<Vec<PairSample>, ModelError> {
        let bound = self.features.declared_bound();
        triples
            .iter()
            .map(|t| {
                let d = self.psi(&t.request, &self.bank.templates[t.preferred])
                    - self.psi(&t.request, &self.bank.templates[t.dispreferred]);
                let norm = d.norm();
                if norm > bound * (1.0 + 1e-12) {
                    return Err(ObjectiveError::Bound { norm, bound }.into());
                }
                Ok(PairSample::labeled(d))
            })
            .collect()
    }

    pub fn objective(&self, samples: Vec<PairSample>) -> Result<PreferenceObjective, ModelError> {
        Ok(PreferenceObjective::new(self.beta, self.phi_base.clone(), samples)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            phi: self.phi.iter().copied().collect(),
            phi_base: self.phi_base.iter().copied().collect(),
            beta: self.beta,
            feature_dimension: self.features.dim(),
            bank_version: BANK_VERSION,
        }
    }

    /// Restores parameters from a checkpoint taken on a compatible model.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<(), ModelError> {
        if ck.feature_dimension != self.features.dim()
            || ck.phi.len() != ck.feature_dimension
            || ck.bank_version != BANK_VERSION
        {
            return Err(ModelError::Checkpoint("incompatible checkpoint".into()));
        }
        if ck.phi_base.as_slice() != self.phi_base.as_slice() || ck.beta != self.beta {
            return Err(ModelError::Checkpoint("base parameters differ".into()));
        }
        self.phi = DVector::from_vec(ck.phi.clone());
        Ok(())
    }
}

/// For each request: draw `m` templates, label each with `evaluator`, and
/// emit every (preferred, dispreferred) cross pair. Requests whose draws are
/// all preferred or all dispreferred contribute nothing.
pub fn build_dataset<F>(
    model: &ConversionModel,
    requests: &[UnlearnRequest],
    m: usize,
    seed: u64,
    mut evaluator: F,
) -> Result<Vec<PreferenceTriple>, ModelError>
where
    F: FnMut(&UnlearnRequest, &Template) -> bool,
{
    let mut out = Vec::new();
    for (i, request) in requests.iter().enumerate() {
        let draws = model.sample_prompts(request, m, seed.wrapping_add(i as u64))?;
        let labels: Vec<(usize, bool)> = draws
            .into_iter()
            .map(|id| (id, evaluator(request, &model.bank.templates[id])))
            .collect();
        for &(p, good_p) in &labels {
            if !good_p {
                continue;
            }
            for &(q, good_q) in &labels {
                if !good_q && p != q {
                    out.push(PreferenceTriple {
                        request: request.clone(),
                        preferred: p,
                        dispreferred: q,
                    });
                }
            }
        }
    }
    Ok(out)
}

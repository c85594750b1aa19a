//! The request-to-prompt converter: a softmax policy over a template bank,
//! trained on pairwise preferences relative to a frozen base policy.

pub mod certify;
pub mod features;
pub mod model;
pub mod objective;
pub mod prefs;
pub mod train;

use nalgebra::{DMatrix, DVector};

pub use certify::{certify, iteration_bound, run_radius, CertifyError, Certificates};
pub use features::{terseness_prior, FeatureMap};
pub use model::{build_dataset, softmax, Checkpoint, ConversionModel, ModelError, PreferenceTriple};
pub use objective::{sigmoid, ObjectiveError, PairSample, PreferenceObjective};
pub use prefs::{
    closed_form_optimum, kl_divergence, preference_probability, synth_preferences,
    total_variation, PreferenceMode, WeightedPair,
};
pub use train::{reference_solve, train, write_trace_csv, TrainConfig, TrainError, TraceRow, TrainOutcome};

use crate::unlearning::UnlearnRequest;

/// Mean preference loss of the model's current parameters.
pub fn loss(model: &ConversionModel, data: &[PairSample]) -> Result<f64, ModelError> {
    Ok(model.objective(data.to_vec())?.loss(&model.phi))
}

pub fn gradient(model: &ConversionModel, data: &[PairSample]) -> Result<DVector<f64>, ModelError> {
    Ok(model.objective(data.to_vec())?.gradient(&model.phi))
}

pub fn hessian(model: &ConversionModel, data: &[PairSample]) -> Result<DMatrix<f64>, ModelError> {
    Ok(model.objective(data.to_vec())?.hessian(&model.phi))
}

/// Weighted pairs from [`synth_preferences`] as training samples for
/// `request`.
pub fn weighted_samples(
    model: &ConversionModel,
    request: &UnlearnRequest,
    pairs: &[WeightedPair],
) -> Vec<PairSample> {
    let templates = &model.bank().templates;
    pairs
        .iter()
        .map(|p| {
            PairSample::weighted(
                model.psi(request, &templates[p.preferred]) - model.psi(request, &templates[p.dispreferred]),
                p.weight,
            )
        })
        .collect()
}

/// Gap between the trained policy and the reward-optimal tilt
/// `pi_base e^Q / Z`: `KL(pi_phi || pi*)`. With rewards normalized as
/// `r = beta ln(pi / pi_base)` this equals `(1/beta) E_{pi_phi}[r_phi - r*]`.
pub fn reward_gap(model: &ConversionModel, request: &UnlearnRequest, q: &[f64]) -> f64 {
    let target = closed_form_optimum(&model.base_policy(request), q);
    kl_divergence(&model.policy(request), &target)
}

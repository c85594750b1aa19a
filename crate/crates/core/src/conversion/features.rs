use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::unlearning::templates::Template;
use crate::unlearning::{ScenarioKind, Strategy, UnlearnRequest};

/// Character-length thresholds separating the four length buckets.
pub const LENGTH_BUCKETS: [usize; 3] = [160, 320, 480];

/// Feature map ψ(x, y) over (request, template).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    /// Scenario one-hot (3), strategy one-hot (3), expected directive
    /// completeness (1), rendered-length bucket one-hot (4).
    Handcrafted,
    /// One-hot template id.
    TemplateIndicator { bank_size: usize },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Handcrafted => 11,
            FeatureMap::TemplateIndicator { bank_size } => *bank_size,
        }
    }

    /// Largest possible norm of a feature difference.
    pub fn declared_bound(&self) -> f64 {
        match self {
            // two differing one-hot pairs of size sqrt 2, completeness <= 1, one bucket pair
            FeatureMap::Handcrafted => 7f64.sqrt(),
            FeatureMap::TemplateIndicator { .. } => 2f64.sqrt(),
        }
    }

    pub fn features(&self, request: &UnlearnRequest, template: &Template) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        match self {
            FeatureMap::Handcrafted => {
                v[scenario_slot(request.kind())] = 1.0;
                v[3 + strategy_slot(template.strategy)] = 1.0;
                v[6] = template.completeness();
                v[7 + length_bucket(template.full_text(request).len())] = 1.0;
            }
            FeatureMap::TemplateIndicator { .. } => v[template.id] = 1.0,
        }
        v
    }
}

fn scenario_slot(kind: ScenarioKind) -> usize {
    kind.index()
}

fn strategy_slot(strategy: Strategy) -> usize {
    strategy.index()
}

pub fn length_bucket(len: usize) -> usize {
    LENGTH_BUCKETS.iter().take_while(|&&t| len >= t).count()
}

/// Base parameters that favor shorter prompts: the untrained converter's
/// habit of answering tersely.
pub fn terseness_prior(map: &FeatureMap) -> DVector<f64> {
    let mut v = DVector::zeros(map.dim());
    if let FeatureMap::Handcrafted = map {
        for (i, w) in [1.5, 0.75, 0.0, -0.75].into_iter().enumerate() {
            v[7 + i] = w;
        }
    }
    v
}

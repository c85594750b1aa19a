use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackConfig;
use crate::agent::remote::RemoteConfig;
use crate::conversion::TrainConfig;
use crate::experiment::ExperimentError;
use crate::metrics::MAX_ATTEMPTS;
use crate::unlearning::{ScenarioKind, Strategy, VerifyOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub obstacles: usize,
    pub treasures: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            count: 50,
            width: 10,
            height: 10,
            obstacles: 15,
            treasures: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Cells per state request.
    pub states: usize,
    /// Cells per route request.
    pub route_length: usize,
    /// Untouched environments compared against the target.
    pub other_envs: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::State,
            states: 1,
            route_length: 3,
            other_envs: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Scripted,
    Remote(RemoteConfig),
}

/// Checks that decide the exit status of `run`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub min_efficacy: Option<f64>,
    pub min_unlearn_at_1: Option<f64>,
    /// Allowed `[low, high]` for the target-environment step ratio.
    pub target_step_ratio: Option<[f64; 2]>,
    /// Allowed `[low, high]` for the other-environment step ratio.
    pub other_step_ratio: Option<[f64; 2]>,
    /// Minimum share of grids where the attack cannot tell the unlearned
    /// agent from the never-seen one.
    pub min_indistinguishable: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grids: GridConfig,
    /// Grids used only to build the conversion model's training data.
    pub training_grids: usize,
    pub scenario: ScenarioConfig,
    pub strategy: Strategy,
    pub backend: BackendConfig,
    pub m: usize,
    pub attempts: usize,
    pub beta: f64,
    pub train: TrainConfig,
    pub verify: VerifyOptions,
    /// `(start, goal)` probe tasks per grid.
    pub eval_tasks: usize,
    pub attack: AttackConfig,
    pub run_attacks: bool,
    pub exploration_budget: usize,
    /// Declared prompt-to-behavior Lipschitz constant.
    pub l_lip: f64,
    pub output_dir: PathBuf,
    pub acceptance: AcceptanceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grids: GridConfig::default(),
            training_grids: 20,
            scenario: ScenarioConfig::default(),
            strategy: Strategy::NaturalLanguage,
            backend: BackendConfig::Scripted,
            m: 3,
            attempts: MAX_ATTEMPTS,
            beta: 1.0,
            train: TrainConfig::default(),
            verify: VerifyOptions::default(),
            eval_tasks: 10,
            attack: AttackConfig::default(),
            run_attacks: true,
            exploration_budget: 2000,
            l_lip: 1.0,
            output_dir: PathBuf::from("out"),
            acceptance: AcceptanceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.attempts == 0 || self.attempts > MAX_ATTEMPTS {
            return fail(format!("attempts must be 1..={MAX_ATTEMPTS}, got {}", self.attempts));
        }
        if self.m == 0 {
            return fail("m must be at least 1".into());
        }
        if self.grids.count == 0 {
            return fail("grids.count must be at least 1".into());
        }
        if self.grids.width == 0 || self.grids.height == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if self.grids.treasures == 0 {
            return fail("grids.treasures must be at least 1".into());
        }
        if self.grids.obstacles + self.grids.treasures + 1 > self.grids.width * self.grids.height {
            return fail("too many obstacles and treasures for the grid size".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if self.verify.trials == 0 || self.verify.budget == 0 {
            return fail("verify.trials and verify.budget must be positive".into());
        }
        if self.eval_tasks == 0 {
            return fail("eval_tasks must be at least 1".into());
        }
        if self.attack.n_pairs == 0 || self.attack.trials_per_pair == 0 {
            return fail("attack.n_pairs and attack.trials_per_pair must be positive".into());
        }
        if self.exploration_budget < self.grids.width * self.grids.height {
            return fail("exploration_budget must cover the grid area".into());
        }
        match self.scenario.kind {
            ScenarioKind::State if self.scenario.states == 0 => {
                return fail("scenario.states must be at least 1".into())
            }
            ScenarioKind::Trajectory if self.scenario.route_length < 2 => {
                return fail("scenario.route_length must be at least 2".into())
            }
            _ => {}
        }
        if let BackendConfig::Remote(r) = &self.backend {
            if r.endpoint.is_empty() || r.model.is_empty() {
                return fail("remote backend needs endpoint and model".into());
            }
        }
        Ok(())
    }
}

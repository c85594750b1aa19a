//! Config-driven experiment runs: grids, agent memory, converter training,
//! unlearning attempts, verification, attacks and output files.

pub mod config;
pub mod pipeline;
pub mod theory;

use thiserror::Error;

use crate::adversary::AttackError;
use crate::agent::backend::BackendError;
use crate::agent::runtime::RuntimeError;
use crate::unlearning::UnlearnError;

pub use config::{
    AcceptanceConfig, BackendConfig, ExperimentConfig, GridConfig, ScenarioConfig,
};
pub use pipeline::{
    derive_seed, prepare_case, run_case, run_experiment, train_converter, write_artifacts,
    AttemptLog, BackendFactory, CheckResult, ExperimentOutcome, GridAttack, GridCase, GridOutcome,
    TrainedConverter,
};
pub use theory::{run_theory_checks, synthetic_instance, TheoryReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("{0}")]
    Failed(String),
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Transport(_) => 3,
            ExperimentError::Failed(_) => 1,
        }
    }
}

impl From<RuntimeError> for ExperimentError {
    fn from(e: RuntimeError) -> Self {
        if e.is_transport() {
            ExperimentError::Transport(e.to_string())
        } else {
            ExperimentError::Failed(e.to_string())
        }
    }
}

impl From<BackendError> for ExperimentError {
    fn from(e: BackendError) -> Self {
        RuntimeError::from(e).into()
    }
}

impl From<UnlearnError> for ExperimentError {
    fn from(e: UnlearnError) -> Self {
        match e {
            UnlearnError::Runtime(r) => r.into(),
            other => ExperimentError::Failed(other.to_string()),
        }
    }
}

impl From<AttackError> for ExperimentError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Runtime(r) => r.into(),
            other => ExperimentError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Failed(e.to_string())
    }
}

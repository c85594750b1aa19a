use thiserror::Error;

use crate::agent::prompt::PromptContext;
use crate::grid::{Action, GridSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("malformed prompt: {0}")]
    Prompt(String),
    #[error("no admissible action")]
    NoAdmissibleAction,
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("no action token in reply {0:?}")]
    Unparseable(String),
}

impl BackendError {
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            BackendError::Transport(_) | BackendError::Status { .. } | BackendError::Unparseable(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Scripted,
    Remote,
}

/// A policy that maps a prompt to an action. The underlying model is never
/// modified; only its inputs change.
pub trait PolicyBackend {
    fn kind(&self) -> BackendKind;

    fn identity(&self) -> String;

    fn decide(&mut self, prompt: &PromptContext, spec: &GridSpec) -> Result<Action, BackendError>;

    /// Restarts any internal random stream.
    fn reseed(&mut self, _seed: u64) {}
}

impl<B: PolicyBackend + ?Sized> PolicyBackend for Box<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn identity(&self) -> String {
        (**self).identity()
    }

    fn decide(&mut self, prompt: &PromptContext, spec: &GridSpec) -> Result<Action, BackendError> {
        (**self).decide(prompt, spec)
    }

    fn reseed(&mut self, seed: u64) {
        (**self).reseed(seed)
    }
}

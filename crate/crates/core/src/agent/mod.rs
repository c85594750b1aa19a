//! The agent loop: assemble a prompt from state, memory and constraints, ask a
//! policy backend for an action, step the environment, record the outcome.

pub mod backend;
pub mod constraints;
pub mod memory;
pub mod prompt;
pub mod remote;
pub mod runtime;
pub mod scripted;

pub use backend::{BackendError, BackendKind, PolicyBackend};
pub use constraints::ConstraintSet;
pub use memory::{erase_memory, MemoryEntry, MemoryError, MemorySelector, MemoryStore};
pub use prompt::{assemble_prompt, PromptContext, MEMORY_WINDOW};
pub use remote::{RemoteBackend, RemoteConfig};
pub use runtime::{run_episode, run_task, EpisodeResult, RuntimeError, Task};
pub use scripted::{scripted_decide, ScriptedBackend};

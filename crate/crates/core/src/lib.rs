//! Behavioral unlearning for grid-navigating agents.
//!
//! * [`grid`]: layouts, transitions, the BFS oracle.
//! * [`agent`]: episode runtime, memory, constraints, scripted and remote backends.
//! * [`unlearning`]: requests, prompt templates, directive parsing, execution and verification.
//! * [`conversion`]: the template-selection model, its loss, certificates and training.
//! * [`adversary`]: inference and reconstruction attacks, behavioral KL.
//! * [`metrics`]: efficacy, step counts, heatmaps, CSV output.
//! * [`experiment`]: config, the end-to-end pipeline and artifact writing.
//!
//! ```
//! use agent_unlearn::grid::generate;
//! let spec = generate(7, 10, 10, 15, 3).unwrap();
//! assert_eq!(spec.treasures().count(), 3);
//! ```

pub mod adversary;
pub mod agent;
pub mod conversion;
pub mod experiment;
pub mod grid;
pub mod metrics;
pub mod plan;
pub mod unlearning;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/grid.md")]
    pub struct Grid;
    #[doc = include_str!("../../../book/src/agent.md")]
    pub struct Agent;
    #[doc = include_str!("../../../book/src/unlearning.md")]
    pub struct Unlearning;
    #[doc = include_str!("../../../book/src/conversion.md")]
    pub struct Conversion;
    #[doc = include_str!("../../../book/src/adversary.md")]
    pub struct Adversary;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}

//! Asynchronous population based training.
//!
//! A population of models is trained in fixed-size steps. Before every step
//! the hyperparameters are perturbed slightly; after every step the checkpoint
//! is evaluated and registered in an append-only [`population::PopulationLog`].
//! Workers pick what to train next through initiator-based evolution: an
//! unclaimed checkpoint challenges a random opponent and the winner of the
//! rank-percentile matchup becomes the parent. The hyperparameter schedule a
//! run discovered is recovered afterwards from the lineage of its best
//! checkpoint (see [`analysis`]).

pub mod analysis;
pub mod config;
pub mod error;
pub mod hparam;
pub mod orchestrator;
pub mod population;
pub mod specaugment;
pub mod tasks;

pub use error::{Error, Result};
pub use hparam::{HyperparamSpec, HyperparamVector, SearchSpace};
pub use population::{CheckpointId, CheckpointRecord, PopulationLog};

/// Random stream used throughout; seedable and split into independent
/// streams per worker.
pub type PbtRng = rand_chacha::ChaCha8Rng;

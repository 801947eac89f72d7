//! Consensus-based optimisation: interacting particle dynamics that
//! concentrate around a Gibbs-weighted mean of the ensemble.

pub mod batching;
pub mod cli;
pub mod consensus;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod integrators;
pub mod objectives;
pub mod rng;

pub use consensus::{weighted_mean, ConsensusPoint};
pub use dynamics::{Dynamics, Variant, VariantParams};
pub use ensemble::{init_ensemble, Ensemble, InitialDistribution};
pub use error::{CboError, Result};
pub use objectives::ObjectiveFunction;
pub use rng::RngPlan;

//! Offline preference-based reinforcement learning with in-dataset
//! trajectory-return regularization.
//!
//! The pipeline: Bradley–Terry reward ensembles learned from segment
//! preferences relabel a reward-free dataset; a decision-transformer policy
//! is trained jointly with twin n-step critics under a linearly ramped
//! Q-weight; inference conditions on several return targets and executes the
//! candidate action with the highest Q. Exact dynamic-programming oracles over
//! tabular environments check every step.

pub mod dataset;
pub mod env;
pub mod error;
pub mod inference;
pub mod oracle;
pub mod config;
pub mod critic;
pub mod policy;
pub mod reward;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

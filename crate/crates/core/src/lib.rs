//! Reward-free skill discovery at desk scale.
//!
//! The crate trains a skill-conditioned policy without any task reward by
//! maximizing a mutual-information objective: a variational skill-dynamics
//! model predicts where the agent goes under each latent skill, and the
//! policy is rewarded for transitions that are predictable under its own
//! skill but not under others. Training is off-policy (replayed transitions
//! are reward-relabeled against the current dynamics model and corrected
//! with clipped importance-sampling weights) and can run asynchronously
//! with several collector threads feeding one trainer.
//!
//! Learned skills are composed for goal reaching by a model-predictive
//! planner that rolls candidate skill sequences through the dynamics model.
//!
//! Entry points: [`orchestrator::run`] for training, [`planner::mpc_execute`]
//! for goal reaching with a trained checkpoint, and the `mi-skills` binary
//! for the command-line surface.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod dads;
pub mod env;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod planner;
pub mod replay;
pub mod sac;

mod error;

pub use error::{Error, Result};

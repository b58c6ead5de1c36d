//! Episodic policy gradient training.
//!
//! A policy-gradient learner (A2C or PPO) is wrapped by a second, outer
//! decision process whose actions are hyperparameter choices. The outer
//! agent values those choices with a kernel-weighted KNN episodic memory
//! keyed by a learned embedding of the learner's parameters and recent
//! gradients.
//!
//! Module map:
//!
//! - [`nn`]: dense networks with exact backpropagation and first-order optimizers.
//! - [`envs`]: CartPole, MountainCarContinuous and a sparse-reward grid.
//! - [`pg`]: rollouts, GAE, A2C and PPO updates.
//! - [`hyperrl`]: hyper-action quantization, hyper-state capture, sparse
//!   hyper-rewards and the learning-episode loop.
//! - [`memory`]: the episodic memory (KNN read, weighted-average write, FIFO).
//! - [`encoder`]: linear projections plus the VAE that produces memory keys.
//! - [`oracle`]: brute-force validators used by tests and `epgt verify`.
//! - [`harness`]: configuration, seeded experiment runs and metrics streams.

pub mod encoder;
pub mod envs;
mod error;
pub mod harness;
pub mod hyperrl;
pub mod memory;
pub mod nn;
pub mod oracle;
pub mod pg;
pub mod rng;

pub use error::{Error, Result};

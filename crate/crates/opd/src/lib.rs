//! On-policy distillation for flow-matching generative models on synthetic
//! 2-D tasks.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - a pretrained conditional velocity field `v(x, t, c)` ([`net`]),
//! - stochastic (SDE) and deterministic (ODE) reverse-time samplers with
//!   Gaussian one-step transition kernels ([`schedule`], [`sampler`]),
//! - distillation objectives built on the closed-form KL between
//!   same-covariance Gaussian transitions, plus the PPO-style surrogate that
//!   has the same expected gradient but extra score-function noise
//!   ([`objectives`]),
//! - stage-1 per-task reinforcement-learning teachers ([`rl_teacher`]),
//! - stage-2 multi-task on-policy distillation and the comparison trainers:
//!   joint multi-task RL, cascade RL and SFT on teacher samples
//!   ([`opd_trainer`]),
//! - a measurement harness for gradient bias/variance and the noise-level /
//!   loss-formulation ablations ([`lab`]),
//! - a seeded, reproducible experiment runner with TOML configs, CSV metrics
//!   and binary checkpoints ([`config`], [`runner`]).
//!
//! Every run is deterministic given its config and master seed: randomness is
//! fanned out into named substreams so no stage can perturb another.
//!
//! See the crate examples for one runnable entry point per capability, and
//! `tests/acceptance.rs` for the quality gates the shipped reference
//! configuration is held to.

pub mod config;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod opd_trainer;
pub mod optim;
pub mod rl_teacher;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod tasks;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{OpdError, Result};

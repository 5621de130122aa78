//! Decentralized SGD laboratory.
//!
//! Runs both orderings of D-SGD (gradient-then-mix and parallel mix-and-gradient)
//! over doubly stochastic gossip matrices, estimates algorithmic stability through
//! coupled runs that share one sample schedule, and evaluates the closed-form
//! generalization bounds those quantities are expected to respect.
//!
//! Module map:
//! - [`topology`]: mixing-matrix constructors, validation and spectral diagnostics.
//! - [`losses`]: loss models with gradients, declared constants and projection.
//! - [`datagen`]: seeded two-class Gaussian mixture data.
//! - [`engine`]: deterministic D-SGD execution and coupled paired runs.
//! - [`stability`]: Monte Carlo stability and generalization-gap estimators.
//! - [`bounds`]: bound evaluators, stepsize admissibility and trajectory diagnostics.
//! - [`config`] / [`cli`]: experiment configuration and CSV-producing commands.

pub mod bounds;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod losses;
pub mod rng;
pub mod stability;
pub mod topology;

pub use error::{Error, Result};

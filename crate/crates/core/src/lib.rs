//! Competitive storage model with a stochastic trend.
//!
//! The crate solves the bounded-capacity storage model's rational-expectations
//! equilibrium, filters the resulting nonlinear state-space model with a
//! bootstrap particle filter, estimates its parameters by particle-marginal
//! Metropolis–Hastings and compares it against a local-level Kalman baseline
//! and deterministic-trend storage models.

pub mod error;
pub mod io;
mod anderson;
pub mod alt_models;
pub mod equilibrium;
pub mod kalman;
pub mod model_eval;
pub mod particle_filter;
pub mod pipeline;
pub mod rng;
pub mod samplers;
pub mod ssm;
pub mod stats;
pub mod roots;

pub use error::{Error, Result};

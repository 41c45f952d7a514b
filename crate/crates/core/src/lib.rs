//! Neural stochastic differential equations with a physics-structured drift and
//! a distance-aware diffusion term, plus the tooling to train them from
//! trajectory data, evaluate their uncertainty, and use them for sampling-based
//! model predictive control.

pub mod dataset;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod mpc;
pub mod solvers;
pub mod trainer;

pub use error::{Error, Result};

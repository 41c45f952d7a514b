//! Reverse-mode differentiation, parameter storage and MLP building blocks.

pub mod mat;
pub mod mlp;
pub mod params;
pub mod rng;
pub mod tape;

pub use mat::Mat;
pub use mlp::{mlp_forward, Activation, MlpSpec};
pub use params::{grad, ParamVars, ParamVector, Segment};
pub use rng::{derive_seed, seeded_gaussians, stream_gaussians, stream_rng};
pub use tape::{sigmoid, softplus, wrap_angle, Grads, Tape, Unary, Var};

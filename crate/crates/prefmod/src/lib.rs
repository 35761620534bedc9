//! Desk-scale lab for personalized preference modulation in a flow-matching
//! diffusion transformer.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: f64 tensors with tape-based reverse-mode differentiation
//!   and an adaptive-moment optimizer.
//! - [`synth`]: a procedural preference world — users with ground-truth
//!   style parameters, a deterministic renderer, and closed-form oracle
//!   estimators for style, content, and perceptual distance.
//! - [`backbone`]: a small joint text-image transformer predicting flow
//!   velocities, with per-token adaptive-layer-norm modulation.
//! - [`adapters`]: learnable user embeddings plus the block-shared and
//!   block-distinct preference adapters that emit per-text-token modulation
//!   directions, and linear combination of bank embeddings for new users.
//! - [`losses`]: flow-matching velocity loss, the user-dispersion loss, and
//!   their weighted combination.
//! - [`training`]: the three training stages, batching, and checkpointing.
//! - [`sampling`]: Euler integration of the learned velocity field.
//! - [`eval`]: oracle-backed evaluation, ablations, and sweep reports.

pub mod adapters;
pub mod fileio;
pub mod backbone;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod training;

pub use tensor::{Tape, Tensor};

//! Structured policy initialization for offline reinforcement learning over
//! factored discrete action spaces.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, Adam and checkpoints.
//! - [`envs`]: the coupled target assembly MDP family and offline datasets.
//! - [`asm`]: the action structure model and its pre-training objectives.
//! - [`policy`]: frozen-representation policies, baselines and critics.
//! - [`distill`]: attention-free student feature extractors.
//! - [`probe`]: linear probes over frozen representations.
//! - [`report`]: time-to-target and early-adaptation summaries.

pub mod error;
pub mod asm;
pub mod distill;
pub mod envs;
pub mod numerics;
pub mod policy;
pub mod probe;
pub mod report;

pub use error::{Error, Result};

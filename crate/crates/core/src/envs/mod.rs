//! Synthetic combinatorial-action environments and offline datasets.

pub mod behavior;
pub mod cta;
pub mod dataset;

pub use behavior::{behavior_action, Tier, MEDIUM_CORRUPTION};
pub use cta::{ActionSpaceSize, EnvParams, EnvSpec, Episode, StepOutcome};
pub use dataset::{generate_dataset, parse_tier_mix, Manifest, OfflineDataset, Transition};

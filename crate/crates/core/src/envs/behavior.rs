use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::cta::EnvSpec;
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

/// Per-slot probability that the medium behavior policy resamples a slot.
pub const MEDIUM_CORRUPTION: f64 = 0.3;

/// Quality tier of the behavior policy that generated a dataset segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Random,
    Medium,
    Expert,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Random, Tier::Medium, Tier::Expert];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::Medium => "medium",
            Tier::Expert => "expert",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Tier::Random),
            "medium" => Ok(Tier::Medium),
            "expert" => Ok(Tier::Expert),
            other => Err(Error::Config(format!("unknown behavior tier `{other}`"))),
        }
    }
}

/// Expert plays the target pattern, medium resamples each slot uniformly
/// with probability [`MEDIUM_CORRUPTION`], random is uniform.
pub fn behavior_action(spec: &EnvSpec, s: &[f64], tier: Tier, rng: &mut Rng) -> Vec<usize> {
    let m = spec.m();
    match tier {
        Tier::Expert => spec.target_pattern(s),
        Tier::Medium => spec
            .target_pattern(s)
            .into_iter()
            .map(|t| {
                if rng.random::<f64>() < MEDIUM_CORRUPTION {
                    rng.random_range(0..m)
                } else {
                    t
                }
            })
            .collect(),
        Tier::Random => (0..spec.n()).map(|_| rng.random_range(0..m)).collect(),
    }
}

//! Named, independently seeded random streams.
//!
//! Every stochastic call site asks for its own stream derived from the run
//! seed and a label, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Child stream of an existing one, e.g. per epoch or per episode.
pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    stream(seed, &format!("{label}/{index}"))
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

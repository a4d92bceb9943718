//! Dense `f64` tensors, a reverse-mode tape, Adam, and parameter checkpoints.

pub mod adam;
mod gemm;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

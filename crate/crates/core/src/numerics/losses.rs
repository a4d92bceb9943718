//! Composite losses assembled from tape primitives.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Mean asymmetric squared loss `|tau - 1[u < 0]| u^2` over all entries of `u`.
pub fn expectile(tape: &mut Tape, u: Var, tau: f64) -> Result<Var> {
    let weights = tape
        .value(u)
        .data()
        .iter()
        .map(|&x| if x < 0.0 { 1.0 - tau } else { tau })
        .collect();
    let sq = tape.square(u)?;
    let w = tape.mul_const(sq, weights)?;
    tape.mean(w)
}

/// Mean of `(a - b)^2` over all entries.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))` per row of `[B, dz]`.
pub fn gaussian_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.add_scalar(t, -1.0)?;
    let t = tape.scale(t, 0.5)?;
    let last = tape.shape(t).len() - 1;
    tape.sum_axis(t, last)
}

/// In-batch InfoNCE for each group: queries and keys are `[G, B, p]`; the
/// positive for query `b` is key `b`, every other key in the group is a
/// negative. Returns the `G * B` per-row losses.
pub fn info_nce(tape: &mut Tape, q: Var, k: Var, temperature: f64) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    if s.len() != 3 || tape.shape(k) != s.as_slice() {
        return Err(Error::dim("info_nce", &s, tape.shape(k)));
    }
    let (g, b) = (s[0], s[1]);
    let logits = tape.bmm(q, k, true)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    let flat = tape.reshape(logits, &[g * b, b])?;
    let targets: Vec<usize> = (0..g).flat_map(|_| 0..b).collect();
    tape.cross_entropy(flat, &targets)
}

//! Small building blocks shared by every model: dense layers, per-slot
//! (grouped) layers, MLPs and layer norm.

use super::params::{Bound, ParamId, ParamStore};
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Standard deviation of every weight matrix and embedding at init.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` over the last axis of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: store.add_normal(format!("{name}.w"), &[fan_in, fan_out], INIT_STD, rng),
            b: store.add_zeros(format!("{name}.b"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p[self.w], p[self.b])
    }
}

/// One independent dense layer per group: `[G, R, in] -> [G, R, out]`.
#[derive(Clone, Debug)]
pub struct GroupedLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub groups: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl GroupedLinear {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        GroupedLinear {
            w: store.add_normal(format!("{name}.w"), &[groups, fan_in, fan_out], INIT_STD, rng),
            b: store.add_zeros(format!("{name}.b"), &[groups, fan_out]),
            groups,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.bmm(x, p[self.w], false)?;
        tape.add_group_bias(y, p[self.b])
    }
}

/// ReLU MLP; no activation after the last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Grouped ReLU MLP: one MLP per slot, applied to `[G, R, in]`.
#[derive(Clone, Debug)]
pub struct GroupedMlp {
    pub layers: Vec<GroupedLinear>,
}

impl GroupedMlp {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| GroupedLinear::new(store, &format!("{name}.{i}"), groups, w[0], w[1], rng))
            .collect();
        GroupedMlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}.g"), &[width]),
            bias: store.add_zeros(format!("{name}.b"), &[width]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)
    }
}

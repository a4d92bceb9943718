//! Attention-free students trained to reproduce a frozen encoder's
//! query-conditioned slot features from the state alone.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::asm::{state_batch, AsmModel};
use crate::error::{Error, Result};
use crate::numerics::losses::mse;
use crate::numerics::nn::Mlp;
use crate::numerics::rng::{stream, substream};
use crate::numerics::{Adam, AdamConfig, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// MLP from state to `N x d` slot features, two hidden layers of width `4d`.
#[derive(Clone, Debug)]
pub struct Student {
    pub n: usize,
    pub d: usize,
    pub state_dim: usize,
    pub store: ParamStore,
    mlp: Mlp,
}

impl Student {
    pub fn new(n: usize, d: usize, state_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "student/init");
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "student", &[state_dim, 4 * d, 4 * d, n * d], &mut rng);
        Student {
            n,
            d,
            state_dim,
            store,
            mlp,
        }
    }

    pub fn from_store(n: usize, d: usize, state_dim: usize, store: &ParamStore) -> Result<Self> {
        let mut s = Student::new(n, d, state_dim, 0);
        s.store.assign(store)?;
        Ok(s)
    }

    /// Slot features `[B, N, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, states: Var) -> Result<Var> {
        let shape = tape.shape(states).to_vec();
        if shape.len() != 2 || shape[1] != self.state_dim {
            return Err(Error::dim("student", &[0, self.state_dim], &shape));
        }
        let y = self.mlp.forward(tape, p, states)?;
        tape.reshape(y, &[shape[0], self.n, self.d])
    }

    /// Bias of the output layer; used to pin the output in tests.
    pub fn output_bias(&self) -> ParamId {
        self.mlp.layers.last().expect("student has layers").b
    }
}

/// Frozen encoder with fixed queries: the distillation target.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub asm: Arc<AsmModel>,
    /// `[N, d]`
    pub queries: Tensor,
}

impl Teacher {
    /// Teacher slot features for a batch, as a constant.
    pub fn features(&self, states: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.asm.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let q = tape.constant(self.queries.clone());
        let b = states.shape()[0];
        let slots = tape.tile(q, b)?;
        let enc = self.asm.encode(&mut tape, &p, s, slots)?;
        Ok(tape.value(enc.slots).clone())
    }
}

/// Mean squared error over all `B x N x d` entries.
pub fn distill_loss(student: &Student, tape: &mut Tape, p: &Bound, states: Var, target: &Tensor) -> Result<Var> {
    let out = student.forward(tape, p, states)?;
    if tape.shape(out) != target.shape() {
        return Err(Error::dim("distill_loss", tape.shape(out), target.shape()));
    }
    let t = tape.constant(target.clone());
    mse(tape, out, t)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains `student` on teacher features at the given states; returns the
/// mean loss per epoch.
pub fn train_student(student: &mut Student, teacher: &Teacher, states: &[Vec<f64>], config: &DistillConfig) -> Result<Vec<f64>> {
    if states.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("distillation needs states and a positive batch size".into()));
    }
    let sd = student.state_dim;
    let mut targets = Vec::new();
    for chunk in states.chunks(512) {
        targets.push(teacher.features(&state_batch(chunk.iter().map(Vec::as_slice), sd)?)?);
    }
    let per_row = student.n * student.d;
    let target_row = |i: usize| &targets[i / 512].data()[(i % 512) * per_row..(i % 512 + 1) * per_row];
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr), &student.store);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut substream(config.seed, "distill/shuffle", epoch as u64));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let s = state_batch(chunk.iter().map(|&i| states[i].as_slice()), sd)?;
            let mut t = Vec::with_capacity(chunk.len() * per_row);
            for &i in chunk {
                t.extend_from_slice(target_row(i));
            }
            let target = Tensor::new(&[chunk.len(), student.n, student.d], t)?;
            let mut tape = Tape::new();
            let p = student.store.bind(&mut tape, true);
            let sv = tape.constant(s);
            let loss = distill_loss(student, &mut tape, &p, sv, &target)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let g = student.store.gradients(&p, &grads);
            opt.step(&mut student.store, &g)?;
        }
        curve.push(total / batches as f64);
    }
    Ok(curve)
}

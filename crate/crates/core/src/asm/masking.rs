//! Masked conditional modeling: perturbation plans and the masked loss.

use rand::Rng as _;

use super::model::{AsmConfig, AsmModel};
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::{Bound, Tape, Var};

/// What happens to a perturbed slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fate {
    /// Replaced by the shared mask token.
    Mask,
    /// Replaced by the recorded uniformly drawn value.
    Random(usize),
    /// Left unchanged but still predicted.
    Keep,
}

/// Perturbation set and per-slot fates for one action tuple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    fates: Vec<Option<Fate>>,
}

impl MaskPlan {
    pub fn from_fates(fates: Vec<Option<Fate>>) -> Self {
        MaskPlan { fates }
    }

    pub fn fates(&self) -> &[Option<Fate>] {
        &self.fates
    }

    pub fn is_perturbed(&self, i: usize) -> bool {
        self.fates[i].is_some()
    }

    /// Indices in the perturbation set.
    pub fn perturbed(&self) -> Vec<usize> {
        (0..self.fates.len()).filter(|&i| self.is_perturbed(i)).collect()
    }
}

/// Each slot enters the set with probability `p_mask`; an empty draw forces
/// one uniformly chosen slot in. Fates are i.i.d. per the corruption ratios.
pub fn sample_mask_plan(config: &AsmConfig, rng: &mut Rng) -> MaskPlan {
    let n = config.n;
    let mut selected: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < config.p_mask).collect();
    if !selected.iter().any(|&s| s) {
        selected[rng.random_range(0..n)] = true;
    }
    let [p_mask_fate, p_random, _] = config.corruption;
    let fates = selected
        .into_iter()
        .map(|sel| {
            sel.then(|| {
                let u: f64 = rng.random();
                if u < p_mask_fate {
                    Fate::Mask
                } else if u < p_mask_fate + p_random {
                    Fate::Random(rng.random_range(0..config.m))
                } else {
                    Fate::Keep
                }
            })
        })
        .collect();
    MaskPlan { fates }
}

/// Slot token ids for `a` after applying `plan`.
pub fn corrupt(config: &AsmConfig, a: &[usize], plan: &MaskPlan) -> Result<Vec<usize>> {
    if a.len() != config.n || plan.fates.len() != config.n {
        return Err(Error::dim("corrupt", &[config.n], &[a.len(), plan.fates.len()]));
    }
    Ok(a.iter()
        .zip(&plan.fates)
        .enumerate()
        .map(|(i, (&v, fate))| match fate {
            None | Some(Fate::Keep) => config.token_id(i, v),
            Some(Fate::Mask) => config.mask_id(),
            Some(Fate::Random(r)) => config.token_id(i, *r),
        })
        .collect())
}

/// Mean over the batch of `sum_{i in M} CE(f_i(h_i), a_i)`.
pub fn mam_loss(
    model: &AsmModel,
    tape: &mut Tape,
    p: &Bound,
    states: Var,
    actions: &[Vec<usize>],
    plans: &[MaskPlan],
) -> Result<Var> {
    let c = &model.config;
    let b = actions.len();
    if plans.len() != b || tape.shape(states).first() != Some(&b) {
        return Err(Error::dim("mam_loss", &[b], &[plans.len()]));
    }
    let mut ids = Vec::with_capacity(b * c.n);
    let mut weights = Vec::with_capacity(b * c.n);
    let mut targets = Vec::with_capacity(b * c.n);
    for (a, plan) in actions.iter().zip(plans) {
        ids.extend(corrupt(c, a, plan)?);
        targets.extend_from_slice(a);
        weights.extend((0..c.n).map(|i| if plan.is_perturbed(i) { 1.0 / b as f64 } else { 0.0 }));
    }
    let slots = model.embed_slots(tape, p, &ids)?;
    let enc = model.encode(tape, p, states, slots)?;
    let logits = model.slot_logits(tape, p, enc.slots)?;
    let flat = tape.reshape(logits, &[b * c.n, c.m])?;
    let ce = tape.cross_entropy(flat, &targets)?;
    let w = tape.mul_const(ce, weights)?;
    tape.sum(w)
}

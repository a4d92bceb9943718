//! Pre-training loop shared by all objectives.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::masking::{corrupt, Fate, MaskPlan};
use super::model::{state_batch, AsmModel};
use super::objectives::{Objective, ObjectiveKind};
use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::rng::{stream, substream};
use crate::numerics::{Adam, AdamConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 256,
            lr: 3e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains `model` (and the objective's heads) on the transitions' `(s, a)`
/// pairs. `on_epoch(k, model)` runs before training with `k = 0` and after
/// every epoch `k >= 1`, which is where callers write checkpoints.
pub fn pretrain(
    model: &mut AsmModel,
    objective: &mut Objective,
    data: &[Transition],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, &AsmModel) -> Result<()>,
) -> Result<PretrainLog> {
    if config.batch_size == 0 || data.is_empty() {
        return Err(Error::Config("pre-training needs a positive batch size and data".into()));
    }
    if objective.kind() == ObjectiveKind::Cam && (config.batch_size < 2 || data.len() < 2) {
        return Err(Error::Config(format!(
            "contrastive objective needs batches of at least 2, got {}",
            config.batch_size.min(data.len())
        )));
    }
    let adam = AdamConfig::with_lr(config.lr);
    let mut opt_asm = Adam::new(adam, &model.store);
    let mut opt_head = objective.store().map(|s| Adam::new(adam, s));
    let mut rng = stream(config.seed, "pretrain/objective");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = PretrainLog::default();
    let state_dim = model.config.state_dim;
    on_epoch(0, model)?;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut substream(config.seed, "pretrain/shuffle", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 && objective.kind() == ObjectiveKind::Cam {
                continue;
            }
            let states = state_batch(chunk.iter().map(|&i| data[i].s.as_slice()), state_dim)?;
            let actions: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].a.clone()).collect();
            let mut tape = Tape::new();
            let pa = model.bind(&mut tape, true);
            let ph = objective.store().map(|s| s.bind(&mut tape, true));
            let sv = tape.constant(states);
            let loss = objective.batch_loss(model, &mut tape, &pa, ph.as_ref(), sv, &actions, &mut rng)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let g_asm = model.store.gradients(&pa, &grads);
            opt_asm.step(&mut model.store, &g_asm)?;
            if let (Some(ph), Some(opt), Some(store)) = (&ph, opt_head.as_mut(), objective.store_mut()) {
                let g = store.gradients(ph, &grads);
                opt.step(store, &g)?;
            }
            if log.steps == 0 {
                log.initial_loss = value;
            }
            log.steps += 1;
            total += value;
            batches += 1;
        }
        log.epoch_losses.push(total / batches.max(1) as f64);
        on_epoch(epoch, model)?;
    }
    Ok(log)
}

/// Accuracy of the slot heads on slots hidden behind the mask token.
/// Every example uses a plan whose perturbed slots are all masked.
pub fn masked_accuracy(model: &AsmModel, data: &[Transition], seed: u64) -> Result<f64> {
    let c = &model.config;
    let mut rng = stream(seed, "asm/masked-accuracy");
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in data.chunks(512) {
        let plans: Vec<MaskPlan> = chunk
            .iter()
            .map(|_| {
                let fates = super::masking::sample_mask_plan(c, &mut rng)
                    .fates()
                    .iter()
                    .map(|f| f.map(|_| Fate::Mask))
                    .collect();
                MaskPlan::from_fates(fates)
            })
            .collect();
        let mut ids = Vec::with_capacity(chunk.len() * c.n);
        for (t, plan) in chunk.iter().zip(&plans) {
            ids.extend(corrupt(c, &t.a, plan)?);
        }
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let states = tape.constant(state_batch(chunk.iter().map(|t| t.s.as_slice()), c.state_dim)?);
        let slots = model.embed_slots(&mut tape, &p, &ids)?;
        let enc = model.encode(&mut tape, &p, states, slots)?;
        let logits = model.slot_logits(&mut tape, &p, enc.slots)?;
        let lv = tape.value(logits).data();
        for (b, (t, plan)) in chunk.iter().zip(&plans).enumerate() {
            for i in plan.perturbed() {
                let row = &lv[(b * c.n + i) * c.m..(b * c.n + i + 1) * c.m];
                hits += usize::from(crate::numerics::argmax(row) == t.a[i]);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

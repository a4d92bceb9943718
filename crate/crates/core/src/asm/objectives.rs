//! Alternative pre-training objectives: a latent-variable model trained on
//! an evidence lower bound, and an in-batch contrastive objective that
//! matches each slot to the rest of its tuple.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::masking::{mam_loss, sample_mask_plan};
use super::model::AsmModel;
use crate::error::{Error, Result};
use crate::numerics::losses::{gaussian_kl, info_nce};
use crate::numerics::nn::{GroupedLinear, Linear};
use crate::numerics::rng::{standard_normal, stream, Rng};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Mam,
    Vam,
    Cam,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [ObjectiveKind::Mam, ObjectiveKind::Vam, ObjectiveKind::Cam];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Mam => "mam",
            ObjectiveKind::Vam => "vam",
            ObjectiveKind::Cam => "cam",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mam" => Ok(ObjectiveKind::Mam),
            "vam" => Ok(ObjectiveKind::Vam),
            "cam" => Ok(ObjectiveKind::Cam),
            other => Err(Error::Config(format!("unknown pre-training objective '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VamConfig {
    pub latent_dim: usize,
    pub beta: f64,
}

impl Default for VamConfig {
    fn default() -> Self {
        VamConfig { latent_dim: 16, beta: 0.5 }
    }
}

/// Posterior and decoder heads used alongside the encoder.
#[derive(Clone, Debug)]
pub struct VamHead {
    pub config: VamConfig,
    pub store: ParamStore,
    mu: Linear,
    logvar: Linear,
    state_embed: Linear,
    decoder: GroupedLinear,
}

/// Components of one evaluation of the variational loss.
#[derive(Clone, Copy, Debug)]
pub struct VamTerms {
    pub total: Var,
    /// `(1/N) sum_i CE` averaged over the batch.
    pub reconstruction: Var,
    /// KL per row, averaged over the batch.
    pub kl: Var,
}

impl VamHead {
    pub fn new(asm: &AsmModel, config: VamConfig, seed: u64) -> Self {
        let c = &asm.config;
        let mut rng = stream(seed, "vam/init");
        let mut store = ParamStore::new();
        let dz = config.latent_dim;
        VamHead {
            mu: Linear::new(&mut store, "mu", c.d, dz, &mut rng),
            logvar: Linear::new(&mut store, "logvar", c.d, dz, &mut rng),
            state_embed: Linear::new(&mut store, "state_embed", c.state_dim, c.d, &mut rng),
            decoder: GroupedLinear::new(&mut store, "decoder", c.n, dz + c.d, c.m, &mut rng),
            config,
            store,
        }
    }

    /// `noise` is the `[B, latent_dim]` reparameterization draw.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        asm: &AsmModel,
        tape: &mut Tape,
        pa: &Bound,
        ph: &Bound,
        states: Var,
        actions: &[Vec<usize>],
        noise: &Tensor,
    ) -> Result<VamTerms> {
        let c = &asm.config;
        let b = actions.len();
        let dz = self.config.latent_dim;
        if noise.shape() != [b, dz] {
            return Err(Error::dim("vam noise", &[b, dz], noise.shape()));
        }
        let slots = asm.embed_slots(tape, pa, &asm.action_ids(actions))?;
        let enc = asm.encode(tape, pa, states, slots)?;
        let pooled = tape.sum_axis(enc.slots, 1)?;
        let pooled = tape.scale(pooled, 1.0 / c.n as f64)?;
        let mu = self.mu.forward(tape, ph, pooled)?;
        let logvar = self.logvar.forward(tape, ph, pooled)?;
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let eps = tape.constant(noise.clone());
        let spread = tape.mul(std, eps)?;
        let z = tape.add(mu, spread)?;
        let se = self.state_embed.forward(tape, ph, states)?;
        let se = tape.relu(se)?;
        let ctx = tape.concat(z, se, 1)?;
        let ctx = tape.tile(ctx, c.n)?;
        let logits = self.decoder.forward(tape, ph, ctx)?;
        let logits = tape.permute(logits, &[1, 0, 2])?;
        let flat = tape.reshape(logits, &[b * c.n, c.m])?;
        let targets: Vec<usize> = actions.iter().flatten().copied().collect();
        let ce = tape.cross_entropy(flat, &targets)?;
        let reconstruction = tape.mean(ce)?;
        let kl_rows = gaussian_kl(tape, mu, logvar)?;
        let kl = tape.mean(kl_rows)?;
        let weighted = tape.scale(kl, self.config.beta)?;
        let total = tape.add(reconstruction, weighted)?;
        Ok(VamTerms { total, reconstruction, kl })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamConfig {
    pub proj_dim: usize,
    pub temperature: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig { proj_dim: 32, temperature: 0.1 }
    }
}

/// Token and context projection heads for the contrastive objective.
#[derive(Clone, Debug)]
pub struct CamHead {
    pub config: CamConfig,
    pub store: ParamStore,
    g_tok: Linear,
    g_ctx: Linear,
}

impl CamHead {
    pub fn new(asm: &AsmModel, config: CamConfig, seed: u64) -> Self {
        let d = asm.config.d;
        let mut rng = stream(seed, "cam/init");
        let mut store = ParamStore::new();
        CamHead {
            g_tok: Linear::new(&mut store, "g_tok", d, config.proj_dim, &mut rng),
            g_ctx: Linear::new(&mut store, "g_ctx", d, config.proj_dim, &mut rng),
            config,
            store,
        }
    }

    /// Slot `i` of example `b` is matched against the leave-one-out mean of
    /// the other slots of the same example, with the other examples of the
    /// batch as negatives. Averaged over slots and examples.
    pub fn loss(
        &self,
        asm: &AsmModel,
        tape: &mut Tape,
        pa: &Bound,
        ph: &Bound,
        states: Var,
        actions: &[Vec<usize>],
    ) -> Result<Var> {
        let c = &asm.config;
        let b = actions.len();
        if b < 2 {
            return Err(Error::Config(format!(
                "contrastive objective needs at least 2 examples per batch, got {b}"
            )));
        }
        if c.n < 2 {
            return Err(Error::Config("contrastive objective needs at least 2 slots".into()));
        }
        let slots = asm.embed_slots(tape, pa, &asm.action_ids(actions))?;
        let enc = asm.encode(tape, pa, states, slots)?;
        let h = enc.slots;
        let total = tape.sum_axis(h, 1)?;
        let total = tape.broadcast_axis(total, 1, c.n)?;
        let others = tape.sub(total, h)?;
        let ctx = tape.scale(others, 1.0 / (c.n - 1) as f64)?;
        let q = self.g_tok.forward(tape, ph, h)?;
        let q = tape.l2_normalize(q)?;
        let k = self.g_ctx.forward(tape, ph, ctx)?;
        let k = tape.l2_normalize(k)?;
        let q = tape.permute(q, &[1, 0, 2])?;
        let k = tape.permute(k, &[1, 0, 2])?;
        let rows = info_nce(tape, q, k, self.config.temperature)?;
        tape.mean(rows)
    }
}

/// The auxiliary heads that accompany the encoder during pre-training.
#[derive(Clone, Debug)]
pub enum Objective {
    Mam,
    Vam(VamHead),
    Cam(CamHead),
}

impl Objective {
    pub fn new(kind: ObjectiveKind, asm: &AsmModel, seed: u64) -> Self {
        match kind {
            ObjectiveKind::Mam => Objective::Mam,
            ObjectiveKind::Vam => Objective::Vam(VamHead::new(asm, VamConfig::default(), seed)),
            ObjectiveKind::Cam => Objective::Cam(CamHead::new(asm, CamConfig::default(), seed)),
        }
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Objective::Mam => ObjectiveKind::Mam,
            Objective::Vam(_) => ObjectiveKind::Vam,
            Objective::Cam(_) => ObjectiveKind::Cam,
        }
    }

    pub fn store(&self) -> Option<&ParamStore> {
        match self {
            Objective::Mam => None,
            Objective::Vam(h) => Some(&h.store),
            Objective::Cam(h) => Some(&h.store),
        }
    }

    pub fn store_mut(&mut self) -> Option<&mut ParamStore> {
        match self {
            Objective::Mam => None,
            Objective::Vam(h) => Some(&mut h.store),
            Objective::Cam(h) => Some(&mut h.store),
        }
    }

    /// Scalar training loss for one batch. `rng` drives mask plans or
    /// latent noise depending on the objective.
    pub fn batch_loss(
        &self,
        asm: &AsmModel,
        tape: &mut Tape,
        pa: &Bound,
        ph: Option<&Bound>,
        states: Var,
        actions: &[Vec<usize>],
        rng: &mut Rng,
    ) -> Result<Var> {
        let missing = || Error::Contract("objective heads were not bound".into());
        match self {
            Objective::Mam => {
                let plans: Vec<_> = actions.iter().map(|_| sample_mask_plan(&asm.config, rng)).collect();
                mam_loss(asm, tape, pa, states, actions, &plans)
            }
            Objective::Vam(h) => {
                let dz = h.config.latent_dim;
                let noise = Tensor::from_fn(&[actions.len(), dz], |_| standard_normal(rng));
                Ok(h.loss(asm, tape, pa, ph.ok_or_else(missing)?, states, actions, &noise)?.total)
            }
            Objective::Cam(h) => h.loss(asm, tape, pa, ph.ok_or_else(missing)?, states, actions),
        }
    }
}

//! Permutation-equivariant Transformer encoder over state tokens and
//! sub-action slots.
//!
//! The input sequence is `M` learned state tokens followed by `N` slot
//! tokens. Slots carry no positional encoding: their identity enters only
//! through the per-slot embedding rows and the per-slot output heads, so
//! permuting slot inputs permutes slot outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{GroupedLinear, LayerNorm, Linear};
use crate::numerics::rng::{stream, Rng};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsmConfig {
    /// Embedding width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of state tokens produced from the raw state.
    pub state_tokens: usize,
    /// Sub-action slots.
    pub n: usize,
    /// Per-slot cardinality.
    pub m: usize,
    pub state_dim: usize,
    /// Per-slot probability of entering the perturbation set.
    pub p_mask: f64,
    /// Mask / random / keep fate probabilities.
    pub corruption: [f64; 3],
    /// Feed-forward width as a multiple of `d`.
    pub ff_mult: usize,
}

impl AsmConfig {
    pub fn new(n: usize, m: usize, state_dim: usize) -> Self {
        AsmConfig {
            d: 64,
            layers: 2,
            heads: 4,
            state_tokens: 2,
            n,
            m,
            state_dim,
            p_mask: 0.3,
            corruption: [0.8, 0.1, 0.1],
            ff_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("asm config: {msg}")));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail("d must be a positive multiple of heads");
        }
        if self.n == 0 || self.m < 2 || self.state_dim == 0 || self.state_tokens == 0 {
            return fail("n, state_dim and state_tokens must be positive and m >= 2");
        }
        if !(self.p_mask > 0.0 && self.p_mask <= 1.0) {
            return fail("p_mask must lie in (0, 1]");
        }
        let total: f64 = self.corruption.iter().sum();
        if self.corruption.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return fail("corruption ratios must be non-negative and sum to 1");
        }
        Ok(())
    }

    /// Row of the shared mask token in the slot embedding table.
    pub fn mask_id(&self) -> usize {
        self.n * self.m
    }

    /// Embedding row for value `v` in slot `i`.
    pub fn token_id(&self, slot: usize, v: usize) -> usize {
        slot * self.m + v
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Encoder weights plus the per-slot prediction heads.
#[derive(Clone, Debug)]
pub struct AsmModel {
    pub config: AsmConfig,
    pub store: ParamStore,
    state_proj: Linear,
    slot_table: ParamId,
    blocks: Vec<Block>,
    final_ln: Option<LayerNorm>,
    heads: GroupedLinear,
}

/// Encoder outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, M, d]`
    pub states: Var,
    /// `[B, N, d]`
    pub slots: Var,
}

impl AsmModel {
    pub fn new(config: AsmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "asm/init");
        Ok(Self::build(config, &mut rng))
    }

    fn build(config: AsmConfig, rng: &mut Rng) -> Self {
        let d = config.d;
        let mut store = ParamStore::new();
        let state_proj = Linear::new(&mut store, "state_proj", config.state_dim, config.state_tokens * d, rng);
        let slot_table = store.add_normal("slot_table", &[config.n * config.m + 1, d], crate::numerics::nn::INIT_STD, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let name = |s: &str| format!("block{l}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut store, &name("ln1"), d),
                    wq: Linear::new(&mut store, &name("wq"), d, d, rng),
                    wk: Linear::new(&mut store, &name("wk"), d, d, rng),
                    wv: Linear::new(&mut store, &name("wv"), d, d, rng),
                    wo: Linear::new(&mut store, &name("wo"), d, d, rng),
                    ln2: LayerNorm::new(&mut store, &name("ln2"), d),
                    ff1: Linear::new(&mut store, &name("ff1"), d, config.ff_mult * d, rng),
                    ff2: Linear::new(&mut store, &name("ff2"), config.ff_mult * d, d, rng),
                }
            })
            .collect();
        let final_ln = (config.layers > 0).then(|| LayerNorm::new(&mut store, "final_ln", d));
        let heads = GroupedLinear::new(&mut store, "slot_heads", config.n, d, config.m, rng);
        AsmModel {
            config,
            store,
            state_proj,
            slot_table,
            blocks,
            final_ln,
            heads,
        }
    }

    /// Rebuilds the model structure for `config` and loads `store` into it.
    pub fn from_store(config: AsmConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut model = Self::build(config, &mut stream(0, "asm/shape-only"));
        model.store.assign(store)?;
        Ok(model)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.store.bind(tape, trainable)
    }

    pub fn slot_table(&self) -> ParamId {
        self.slot_table
    }

    /// Looks up slot tokens; `ids` holds `B * N` embedding rows, see
    /// [`AsmConfig::token_id`] and [`AsmConfig::mask_id`].
    pub fn embed_slots(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        let n = self.config.n;
        if ids.len() % n != 0 {
            return Err(Error::dim("embed_slots", &[n], &[ids.len()]));
        }
        let e = tape.embedding(p[self.slot_table], ids)?;
        tape.reshape(e, &[ids.len() / n, n, self.config.d])
    }

    /// Token ids for uncorrupted action tuples.
    pub fn action_ids(&self, actions: &[Vec<usize>]) -> Vec<usize> {
        actions
            .iter()
            .flat_map(|a| a.iter().enumerate().map(|(i, &v)| self.config.token_id(i, v)))
            .collect()
    }

    /// Full self-attention over `M` state tokens and the `N` given slot tokens.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, states: Var, slots: Var) -> Result<Encoded> {
        let c = &self.config;
        let (d, mt) = (c.d, c.state_tokens);
        let ss = tape.shape(states).to_vec();
        let sl = tape.shape(slots).to_vec();
        if ss.len() != 2 || ss[1] != c.state_dim || sl != [ss[0], c.n, d] {
            return Err(Error::dim("encode", &ss, &sl));
        }
        let b = ss[0];
        let st = self.state_proj.forward(tape, p, states)?;
        let st = tape.reshape(st, &[b, mt, d])?;
        let mut x = tape.concat(st, slots, 1)?;
        for block in &self.blocks {
            x = self.block_forward(tape, p, block, x)?;
        }
        if let Some(ln) = &self.final_ln {
            x = ln.forward(tape, p, x)?;
        }
        Ok(Encoded {
            states: tape.slice(x, 1, 0, mt)?,
            slots: tape.slice(x, 1, mt, c.n)?,
        })
    }

    fn block_forward(&self, tape: &mut Tape, p: &Bound, blk: &Block, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (c.heads, c.d / c.heads);
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, h, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[b * h, t, dh])
        };
        let hn = blk.ln1.forward(tape, p, x)?;
        let q = blk.wq.forward(tape, p, hn)?;
        let k = blk.wk.forward(tape, p, hn)?;
        let v = blk.wv.forward(tape, p, hn)?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = tape.softmax(scores)?;
        let ctx = tape.bmm(att, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let o = blk.wo.forward(tape, p, ctx)?;
        let x = tape.add(x, o)?;
        let hn = blk.ln2.forward(tape, p, x)?;
        let f = blk.ff1.forward(tape, p, hn)?;
        let f = tape.relu(f)?;
        let f = blk.ff2.forward(tape, p, f)?;
        tape.add(x, f)
    }

    /// Per-slot logits `[B, N, m]` from slot embeddings `[B, N, d]`.
    pub fn slot_logits(&self, tape: &mut Tape, p: &Bound, slots: Var) -> Result<Var> {
        let g = tape.permute(slots, &[1, 0, 2])?;
        let y = self.heads.forward(tape, p, g)?;
        tape.permute(y, &[1, 0, 2])
    }

    /// Parameters of the per-slot prediction heads (not part of the encoder).
    pub fn head_params(&self) -> [ParamId; 2] {
        [self.heads.w, self.heads.b]
    }
}

/// Stacks state vectors into a `[B, state_dim]` tensor.
pub fn state_batch<'a>(states: impl IntoIterator<Item = &'a [f64]>, state_dim: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in states {
        if s.len() != state_dim {
            return Err(Error::dim("state_batch", &[state_dim], &[s.len()]));
        }
        data.extend_from_slice(s);
        rows += 1;
    }
    Tensor::new(&[rows, state_dim], data)
}

//! Policies over factored actions: the query-contextualized policy on top of
//! an encoder, and the factored and autoregressive baselines.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::asm::{AsmConfig, AsmModel};
use crate::distill::Student;
use crate::error::{Error, Result};
use crate::numerics::nn::{GroupedLinear, GroupedMlp, Mlp, INIT_STD};
use crate::numerics::rng::{stream, Rng};
use crate::numerics::{argmax, Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spin,
    SpinDistill,
    Factored,
    Autoregressive,
    E2e,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Spin, Method::SpinDistill, Method::Factored, Method::Autoregressive, Method::E2e];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Spin => "spin",
            Method::SpinDistill => "spin_distill",
            Method::Factored => "factored",
            Method::Autoregressive => "autoregressive",
            Method::E2e => "e2e",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// How Stage-2 slot heads are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Fresh `d -> 2d -> m` MLP per slot.
    #[default]
    Fresh,
    /// Copy of the encoder's pre-trained linear slot heads.
    WarmStart,
}

/// Source of the per-slot features consumed by contextual heads.
#[derive(Clone, Debug)]
pub enum Features {
    /// Encoder with weights excluded from every update.
    Frozen(Arc<AsmModel>),
    /// Encoder trained jointly with the heads.
    Joint(Box<AsmModel>),
    /// Frozen state-only student.
    Student(Arc<Student>),
}

#[derive(Clone, Debug)]
enum SlotHeads {
    Mlp(GroupedMlp),
    Linear(GroupedLinear),
}

#[derive(Clone, Debug)]
enum Arch {
    Contextual {
        features: Features,
        queries: Option<ParamId>,
        heads: SlotHeads,
    },
    Factored(Mlp),
    Autoregressive {
        /// Position `k` predicts slot `order[k]` given slots `order[..k]`.
        order: Vec<usize>,
        net: GroupedMlp,
    },
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct PolicyBound {
    pub own: Bound,
    /// Encoder or student parameters, when the policy has them.
    pub features: Option<Bound>,
}

/// Per-slot allowed values, `[B][N][m]`.
pub type AllowedSets = Vec<Vec<Vec<bool>>>;

#[derive(Clone, Debug)]
pub struct Policy {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub state_dim: usize,
    pub store: ParamStore,
    arch: Arch,
}

impl Policy {
    /// Learnable queries and heads over a frozen pre-trained encoder.
    pub fn spin(asm: Arc<AsmModel>, heads: HeadInit, seed: u64) -> Self {
        let c = asm.config.clone();
        let mut rng = stream(seed, "policy/spin");
        let mut store = ParamStore::new();
        let queries = store.add_normal("queries", &[c.n, c.d], INIT_STD, &mut rng);
        let heads = match heads {
            HeadInit::Fresh => SlotHeads::Mlp(GroupedMlp::new(&mut store, "heads", c.n, &[c.d, 2 * c.d, c.m], &mut rng)),
            HeadInit::WarmStart => {
                let lin = GroupedLinear::new(&mut store, "heads", c.n, c.d, c.m, &mut rng);
                let [w, b] = asm.head_params();
                *store.get_mut(lin.w) = asm.store.get(w).clone();
                *store.get_mut(lin.b) = asm.store.get(b).clone();
                SlotHeads::Linear(lin)
            }
        };
        Policy {
            method: Method::Spin,
            n: c.n,
            m: c.m,
            state_dim: c.state_dim,
            store,
            arch: Arch::Contextual {
                features: Features::Frozen(asm),
                queries: Some(queries),
                heads,
            },
        }
    }

    /// Same architecture as [`Policy::spin`] with a fresh encoder trained
    /// jointly and no pre-training.
    pub fn e2e(config: AsmConfig, seed: u64) -> Result<Self> {
        let asm = AsmModel::new(config, seed)?;
        let mut p = Policy::spin(Arc::new(asm.clone()), HeadInit::Fresh, seed);
        p.method = Method::E2e;
        if let Arch::Contextual { features, .. } = &mut p.arch {
            *features = Features::Joint(Box::new(asm));
        }
        Ok(p)
    }

    /// Fresh heads over a frozen student; the student already bakes in the
    /// teacher's queries.
    pub fn distilled(student: Arc<Student>, m: usize, seed: u64) -> Self {
        let (n, d) = (student.n, student.d);
        let mut rng = stream(seed, "policy/distill");
        let mut store = ParamStore::new();
        let heads = GroupedMlp::new(&mut store, "heads", n, &[d, 2 * d, m], &mut rng);
        Policy {
            method: Method::SpinDistill,
            n,
            m,
            state_dim: student.state_dim,
            store,
            arch: Arch::Contextual {
                features: Features::Student(student),
                queries: None,
                heads: SlotHeads::Mlp(heads),
            },
        }
    }

    /// Fresh linear head per slot over frozen features; encoder features also
    /// get fresh queries.
    pub fn linear_probe(features: Features, m: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "policy/probe");
        let mut store = ParamStore::new();
        let (method, n, d, state_dim, queries) = match &features {
            Features::Frozen(asm) => {
                let c = &asm.config;
                let q = store.add_normal("queries", &[c.n, c.d], INIT_STD, &mut rng);
                (Method::Spin, c.n, c.d, c.state_dim, Some(q))
            }
            Features::Student(s) => (Method::SpinDistill, s.n, s.d, s.state_dim, None),
            Features::Joint(_) => return Err(Error::Contract("probes need frozen features".into())),
        };
        let heads = GroupedLinear::new(&mut store, "probe", n, d, m, &mut rng);
        Ok(Policy {
            method,
            n,
            m,
            state_dim,
            store,
            arch: Arch::Contextual {
                features,
                queries,
                heads: SlotHeads::Linear(heads),
            },
        })
    }

    /// State MLP to `N x m` logits.
    pub fn factored(n: usize, m: usize, state_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "policy/factored");
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "factored", &[state_dim, hidden, hidden, n * m], &mut rng);
        Policy {
            method: Method::Factored,
            n,
            m,
            state_dim,
            store,
            arch: Arch::Factored(mlp),
        }
    }

    /// One MLP per position over the state and one-hot codes of the
    /// preceding slots in `order`.
    pub fn autoregressive(n: usize, m: usize, state_dim: usize, hidden: usize, order: Vec<usize>, seed: u64) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::Config(format!("slot order {order:?} is not a permutation of 0..{n}")));
        }
        let mut rng = stream(seed, "policy/autoregressive");
        let mut store = ParamStore::new();
        let net = GroupedMlp::new(&mut store, "ar", n, &[state_dim + n * m, hidden, m], &mut rng);
        Ok(Policy {
            method: Method::Autoregressive,
            n,
            m,
            state_dim,
            store,
            arch: Arch::Autoregressive { order, net },
        })
    }

    /// Rebuilds structure for `method` and loads `store`.
    pub fn with_store(mut self, store: &ParamStore) -> Result<Self> {
        self.store.assign(store)?;
        Ok(self)
    }

    pub fn features(&self) -> Option<&Features> {
        match &self.arch {
            Arch::Contextual { features, .. } => Some(features),
            _ => None,
        }
    }

    /// Encoder store trained with the policy (end-to-end only).
    pub fn joint_store(&self) -> Option<&ParamStore> {
        match &self.arch {
            Arch::Contextual {
                features: Features::Joint(asm),
                ..
            } => Some(&asm.store),
            _ => None,
        }
    }

    pub fn joint_store_mut(&mut self) -> Option<&mut ParamStore> {
        match &mut self.arch {
            Arch::Contextual {
                features: Features::Joint(asm),
                ..
            } => Some(&mut asm.store),
            _ => None,
        }
    }

    /// Number of parameters updated by the actor optimizer.
    pub fn trainable_scalars(&self) -> usize {
        self.store.num_scalars() + self.joint_store().map_or(0, ParamStore::num_scalars)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PolicyBound {
        let own = self.store.bind(tape, trainable);
        let features = match &self.arch {
            Arch::Contextual { features, .. } => Some(match features {
                Features::Frozen(asm) => asm.bind(tape, false),
                Features::Joint(asm) => asm.bind(tape, trainable),
                Features::Student(s) => s.store.bind(tape, false),
            }),
            _ => None,
        };
        PolicyBound { own, features }
    }

    /// Per-slot features `[B, N, d]` with the learnable queries in the slot
    /// positions.
    pub fn contextualize(&self, tape: &mut Tape, pb: &PolicyBound, states: Var) -> Result<Var> {
        let Arch::Contextual { features, queries, .. } = &self.arch else {
            return Err(Error::Contract(format!("{} policy has no encoder to contextualize with", self.method)));
        };
        let pf = pb
            .features
            .as_ref()
            .ok_or_else(|| Error::Contract("feature parameters were not bound".into()))?;
        let b = tape.shape(states)[0];
        match (features, queries) {
            (Features::Frozen(asm), Some(q)) => {
                let slots = tape.tile(pb.own[*q], b)?;
                Ok(asm.encode(tape, pf, states, slots)?.slots)
            }
            (Features::Joint(asm), Some(q)) => {
                let slots = tape.tile(pb.own[*q], b)?;
                Ok(asm.encode(tape, pf, states, slots)?.slots)
            }
            (Features::Student(s), _) => s.forward(tape, pf, states),
            _ => Err(Error::Contract("encoder features need queries".into())),
        }
    }

    /// Per-slot logits `[B, N, m]` in slot order. The autoregressive policy
    /// needs the actions it is conditioned on (teacher forcing).
    pub fn slot_logits(&self, tape: &mut Tape, pb: &PolicyBound, states: Var, actions: Option<&[Vec<usize>]>) -> Result<Var> {
        let b = tape.shape(states)[0];
        match &self.arch {
            Arch::Contextual { heads, .. } => {
                let z = self.contextualize(tape, pb, states)?;
                let g = tape.permute(z, &[1, 0, 2])?;
                let y = match heads {
                    SlotHeads::Mlp(h) => h.forward(tape, &pb.own, g)?,
                    SlotHeads::Linear(h) => h.forward(tape, &pb.own, g)?,
                };
                tape.permute(y, &[1, 0, 2])
            }
            Arch::Factored(mlp) => {
                let y = mlp.forward(tape, &pb.own, states)?;
                tape.reshape(y, &[b, self.n, self.m])
            }
            Arch::Autoregressive { order, net } => {
                let actions = actions.ok_or_else(|| Error::Contract("autoregressive logits need the conditioning actions".into()))?;
                if actions.len() != b {
                    return Err(Error::dim("autoregressive", &[b], &[actions.len()]));
                }
                let (n, m, sd) = (self.n, self.m, self.state_dim);
                let width = sd + n * m;
                let sv = tape.value(states).data().to_vec();
                let mut x = vec![0.0; n * b * width];
                for k in 0..n {
                    for (r, a) in actions.iter().enumerate() {
                        let row = &mut x[(k * b + r) * width..(k * b + r + 1) * width];
                        row[..sd].copy_from_slice(&sv[r * sd..(r + 1) * sd]);
                        for &j in &order[..k] {
                            row[sd + j * m + a[j]] = 1.0;
                        }
                    }
                }
                let prefix = tape.constant(Tensor::new(&[n, b, width], x)?);
                let y = net.forward(tape, &pb.own, prefix)?;
                // Position k holds slot order[k]; scatter back to slot order.
                let mut inverse = vec![0; n];
                for (k, &slot) in order.iter().enumerate() {
                    inverse[slot] = k;
                }
                let mut parts = Vec::with_capacity(n);
                for &k in &inverse {
                    parts.push(tape.slice(y, 0, k, 1)?);
                }
                let mut stacked = parts[0];
                for &p in &parts[1..] {
                    stacked = tape.concat(stacked, p, 0)?;
                }
                tape.permute(stacked, &[1, 0, 2])
            }
        }
    }

    /// `sum_i log pi(a_i | s, ...)` per example, `[B]`.
    pub fn log_prob(&self, tape: &mut Tape, pb: &PolicyBound, states: Var, actions: &[Vec<usize>]) -> Result<Var> {
        let b = actions.len();
        for a in actions {
            if a.len() != self.n || a.iter().any(|&v| v >= self.m) {
                return Err(Error::Contract(format!("action {a:?} outside {}^{}", self.m, self.n)));
            }
        }
        let logits = self.slot_logits(tape, pb, states, Some(actions))?;
        let flat = tape.reshape(logits, &[b * self.n, self.m])?;
        let targets: Vec<usize> = actions.iter().flatten().copied().collect();
        let ce = tape.cross_entropy(flat, &targets)?;
        let ce = tape.reshape(ce, &[b, self.n])?;
        let nll = tape.sum_axis(ce, 1)?;
        tape.scale(nll, -1.0)
    }

    /// Logits as plain rows, no gradient.
    fn logits_value(&self, states: &Tensor, actions: Option<&[Vec<usize>]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pb = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let l = self.slot_logits(&mut tape, &pb, s, actions)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Chooses one value per slot, in the policy's generation order. `pick`
    /// maps `(row, slot, logits)` to a value.
    fn decode(&self, states: &Tensor, mut pick: impl FnMut(usize, usize, &[f64]) -> usize) -> Result<Vec<Vec<usize>>> {
        let b = states.shape()[0];
        let (n, m) = (self.n, self.m);
        let mut actions = vec![vec![0; n]; b];
        match &self.arch {
            Arch::Autoregressive { order, .. } => {
                for &slot in order {
                    let lv = self.logits_value(states, Some(&actions))?;
                    for (r, a) in actions.iter_mut().enumerate() {
                        a[slot] = pick(r, slot, &lv[(r * n + slot) * m..(r * n + slot + 1) * m]);
                    }
                }
            }
            _ => {
                let lv = self.logits_value(states, None)?;
                for (r, a) in actions.iter_mut().enumerate() {
                    for (slot, v) in a.iter_mut().enumerate() {
                        *v = pick(r, slot, &lv[(r * n + slot) * m..(r * n + slot + 1) * m]);
                    }
                }
            }
        }
        Ok(actions)
    }

    /// Per-slot argmax, optionally restricted to allowed values.
    pub fn greedy(&self, states: &Tensor, allowed: Option<&AllowedSets>) -> Result<Vec<Vec<usize>>> {
        self.decode(states, |r, slot, row| match allowed {
            None => argmax(row),
            Some(sets) => restricted_argmax(row, &sets[r][slot]),
        })
    }

    /// One sample from the policy per state.
    pub fn sample(&self, states: &Tensor, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        self.decode(states, |_, _, row| sample_logits(row, rng))
    }

    /// Exact joint probability by exhaustive evaluation; small spaces only.
    pub fn log_prob_value(&self, states: &Tensor, actions: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pb = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let lp = self.log_prob(&mut tape, &pb, s, actions)?;
        Ok(tape.value(lp).data().to_vec())
    }
}

pub(crate) fn restricted_argmax(row: &[f64], allowed: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (v, (&x, &ok)) in row.iter().zip(allowed).enumerate() {
        if ok && best.is_none_or(|b| x > row[b]) {
            best = Some(v);
        }
    }
    best.unwrap_or_else(|| argmax(row))
}

fn sample_logits(row: &[f64], rng: &mut Rng) -> usize {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    row.len() - 1
}

//! Critics and the per-algorithm weight computations for weighted
//! log-likelihood actors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::actor::{AllowedSets, Policy};
use crate::error::{Error, Result};
use crate::numerics::losses::{expectile, mse};
use crate::numerics::nn::Mlp;
use crate::numerics::rng::{stream, Rng};
use crate::numerics::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Iql,
    Awac,
    Bcq,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Iql => "iql",
            Algo::Awac => "awac",
            Algo::Bcq => "bcq",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iql" => Ok(Algo::Iql),
            "awac" => Ok(Algo::Awac),
            "bcq" => Ok(Algo::Bcq),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub algo: Algo,
    pub gamma: f64,
    pub expectile: f64,
    /// Advantage temperature for IQL and BCQ weights.
    pub beta_adv: f64,
    pub w_max: f64,
    /// Per-slot support threshold relative to the behavior argmax.
    pub bcq_threshold: f64,
    pub awac_samples: usize,
    pub awac_lambda: f64,
    pub polyak: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub critic_hidden: usize,
    /// Total gradient steps.
    pub steps: usize,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            algo: Algo::Iql,
            gamma: 0.99,
            expectile: 0.7,
            beta_adv: 3.0,
            w_max: 100.0,
            bcq_threshold: 0.3,
            awac_samples: 4,
            awac_lambda: 1.0,
            polyak: 0.005,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            critic_hidden: 256,
            steps: 1_000_000,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("algo config: {msg}")));
        if !(0.5..1.0).contains(&self.expectile) {
            return fail("expectile must lie in [0.5, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if !(self.bcq_threshold > 0.0 && self.bcq_threshold <= 1.0) {
            return fail("bcq_threshold must lie in (0, 1]");
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return fail("polyak must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.awac_samples == 0 || self.critic_hidden == 0 {
            return fail("batch_size, awac_samples and critic_hidden must be positive");
        }
        if self.w_max <= 0.0 || self.awac_lambda <= 0.0 || self.beta_adv < 0.0 {
            return fail("w_max and awac_lambda must be positive and beta_adv non-negative");
        }
        Ok(())
    }
}

/// `min(exp(scale * advantage), w_max)`.
pub fn advantage_weight(advantage: f64, scale: f64, w_max: f64) -> f64 {
    (scale * advantage).exp().min(w_max)
}

/// Order-free action code with one active entry per slot, `[B, N*m]`.
pub fn multi_hot(actions: &[Vec<usize>], n: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; actions.len() * n * m];
    for (r, a) in actions.iter().enumerate() {
        for (i, &v) in a.iter().enumerate() {
            data[r * n * m + i * m + v] = 1.0;
        }
    }
    Tensor::new(&[actions.len(), n * m], data).expect("consistent shape")
}

/// A batch of transitions in tensor form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
    /// Dataset action at the successor state, when one was logged.
    pub next_actions: Vec<Option<Vec<usize>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug)]
struct TwinQ {
    q1: Mlp,
    q2: Mlp,
}

/// Losses and weights produced by one critic step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticStep {
    pub q_loss: f64,
    pub v_loss: Option<f64>,
    pub behavior_loss: Option<f64>,
    /// Non-negative actor weights for the batch's dataset actions.
    pub weights: Vec<f64>,
}

/// Twin Q networks with Polyak targets, a state-value network and a
/// per-slot behavior model.
#[derive(Clone, Debug)]
pub struct Critic {
    pub config: AlgoConfig,
    pub n: usize,
    pub m: usize,
    pub state_dim: usize,
    pub q_store: ParamStore,
    pub q_target: ParamStore,
    pub v_store: ParamStore,
    pub behavior_store: ParamStore,
    twin: TwinQ,
    v: Mlp,
    behavior: Mlp,
    q_opt: Adam,
    v_opt: Adam,
    behavior_opt: Adam,
}

impl Critic {
    pub fn new(config: AlgoConfig, n: usize, m: usize, state_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.critic_hidden;
        let mut rng = stream(seed, "critic/init");
        let mut q_store = ParamStore::new();
        let twin = TwinQ {
            q1: Mlp::new(&mut q_store, "q1", &[state_dim + n * m, h, h, 1], &mut rng),
            q2: Mlp::new(&mut q_store, "q2", &[state_dim + n * m, h, h, 1], &mut rng),
        };
        let mut v_store = ParamStore::new();
        let v = Mlp::new(&mut v_store, "v", &[state_dim, h, h, 1], &mut rng);
        let mut behavior_store = ParamStore::new();
        let behavior = Mlp::new(&mut behavior_store, "behavior", &[state_dim, h, h, n * m], &mut rng);
        let lr = AdamConfig::with_lr(config.critic_lr);
        Ok(Critic {
            q_target: q_store.clone(),
            q_opt: Adam::new(lr, &q_store),
            v_opt: Adam::new(lr, &v_store),
            behavior_opt: Adam::new(lr, &behavior_store),
            config,
            n,
            m,
            state_dim,
            q_store,
            v_store,
            behavior_store,
            twin,
            v,
            behavior,
        })
    }

    fn q_input(&self, tape: &mut Tape, states: &Tensor, actions: &[Vec<usize>]) -> Result<Var> {
        let s = tape.constant(states.clone());
        let a = tape.constant(multi_hot(actions, self.n, self.m));
        tape.concat(s, a, 1)
    }

    /// `(Q1, Q2)` from `store` as plain values.
    fn twin_values(&self, store: &ParamStore, states: &Tensor, actions: &[Vec<usize>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = self.q_input(&mut tape, states, actions)?;
        let q1 = self.twin.q1.forward(&mut tape, &p, x)?;
        let q2 = self.twin.q2.forward(&mut tape, &p, x)?;
        Ok((tape.value(q1).data().to_vec(), tape.value(q2).data().to_vec()))
    }

    /// Twin-minimum of the target networks.
    pub fn target_q(&self, states: &Tensor, actions: &[Vec<usize>]) -> Result<Vec<f64>> {
        let (a, b) = self.twin_values(&self.q_target, states, actions)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    /// Twin-minimum of the online networks.
    pub fn online_q(&self, states: &Tensor, actions: &[Vec<usize>]) -> Result<Vec<f64>> {
        let (a, b) = self.twin_values(&self.q_store, states, actions)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    pub fn value(&self, states: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.v_store.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let v = self.v.forward(&mut tape, &p, s)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Per-slot behavior probabilities, `[B][N][m]`.
    pub fn behavior_probs(&self, states: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let p = self.behavior_store.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let l = self.behavior.forward(&mut tape, &p, s)?;
        let b = states.shape()[0];
        let l = tape.reshape(l, &[b, self.n, self.m])?;
        let pr = tape.softmax(l)?;
        let data = tape.value(pr).data();
        Ok((0..b)
            .map(|r| (0..self.n).map(|i| data[(r * self.n + i) * self.m..(r * self.n + i + 1) * self.m].to_vec()).collect())
            .collect())
    }

    /// Values whose behavior probability is at least `threshold` times the
    /// slot's largest.
    pub fn allowed_sets(&self, states: &Tensor) -> Result<AllowedSets> {
        Ok(self
            .behavior_probs(states)?
            .iter()
            .map(|slots| slots.iter().map(|p| support_mask(p, self.config.bcq_threshold)).collect())
            .collect())
    }

    /// One regression step of `Q1, Q2` towards `targets`.
    fn fit_q(&mut self, batch: &Batch, targets: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.q_store.bind(&mut tape, true);
        let x = self.q_input(&mut tape, &batch.states, &batch.actions)?;
        let y = tape.constant(Tensor::new(&[batch.len(), 1], targets.to_vec())?);
        let q1 = self.twin.q1.forward(&mut tape, &p, x)?;
        let q2 = self.twin.q2.forward(&mut tape, &p, x)?;
        let l1 = mse(&mut tape, q1, y)?;
        let l2 = mse(&mut tape, q2, y)?;
        let loss = tape.add(l1, l2)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let g = self.q_store.gradients(&p, &grads);
        self.q_opt.step(&mut self.q_store, &g)?;
        self.q_target.polyak_from(&self.q_store, self.config.polyak)?;
        Ok(value)
    }

    fn td_targets(&self, batch: &Batch, next_values: &[f64]) -> Vec<f64> {
        let g = self.config.gamma;
        batch
            .rewards
            .iter()
            .zip(&batch.dones)
            .zip(next_values)
            .map(|((&r, &done), &v)| r + if done { 0.0 } else { g * v })
            .collect()
    }

    /// Expectile regression of `V(s)` onto the target twin-minimum, then
    /// TD regression of `Q` onto `r + gamma V(s')`. Weights use the
    /// pre-update advantage `Q_target(s, a) - V(s)`.
    pub fn iql_update(&mut self, batch: &Batch) -> Result<CriticStep> {
        let qt = self.target_q(&batch.states, &batch.actions)?;
        let mut tape = Tape::new();
        let p = self.v_store.bind(&mut tape, true);
        let s = tape.constant(batch.states.clone());
        let v = self.v.forward(&mut tape, &p, s)?;
        let v_now = tape.value(v).data().to_vec();
        let target = tape.constant(Tensor::new(&[batch.len(), 1], qt.clone())?);
        let u = tape.sub(target, v)?;
        let v_loss = expectile(&mut tape, u, self.config.expectile)?;
        let v_loss_value = tape.value(v_loss).item();
        let grads = tape.backward(v_loss)?;
        let g = self.v_store.gradients(&p, &grads);
        self.v_opt.step(&mut self.v_store, &g)?;

        let v_next = self.value(&batch.next_states)?;
        let targets = self.td_targets(batch, &v_next);
        let q_loss = self.fit_q(batch, &targets)?;
        let weights = qt
            .iter()
            .zip(&v_now)
            .map(|(q, v)| advantage_weight(q - v, self.config.beta_adv, self.config.w_max))
            .collect();
        Ok(CriticStep {
            q_loss,
            v_loss: Some(v_loss_value),
            behavior_loss: None,
            weights,
        })
    }

    /// SARSA-style TD on dataset tuples; the advantage baseline is the mean
    /// twin-minimum over `awac_samples` policy samples.
    pub fn awac_update(&mut self, batch: &Batch, policy: &Policy, rng: &mut Rng) -> Result<CriticStep> {
        let next_actions = self.next_actions(batch, policy, rng)?;
        let q_next = self.target_q(&batch.next_states, &next_actions)?;
        let targets = self.td_targets(batch, &q_next);
        let q_loss = self.fit_q(batch, &targets)?;
        let q_data = self.online_q(&batch.states, &batch.actions)?;
        let baseline = self.policy_baseline(&batch.states, policy, rng)?;
        let weights = q_data
            .iter()
            .zip(&baseline)
            .map(|(q, b)| advantage_weight(q - b, 1.0 / self.config.awac_lambda, self.config.w_max))
            .collect();
        Ok(CriticStep {
            q_loss,
            v_loss: None,
            behavior_loss: None,
            weights,
        })
    }

    /// Monte-Carlo estimate of `E_{a ~ pi} Q(s, a)` per state.
    pub fn policy_baseline(&self, states: &Tensor, policy: &Policy, rng: &mut Rng) -> Result<Vec<f64>> {
        let k = self.config.awac_samples;
        let mut acc = vec![0.0; states.shape()[0]];
        for _ in 0..k {
            let a = policy.sample(states, rng)?;
            for (x, q) in acc.iter_mut().zip(self.online_q(states, &a)?) {
                *x += q / k as f64;
            }
        }
        Ok(acc)
    }

    fn next_actions(&self, batch: &Batch, policy: &Policy, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        if batch.next_actions.iter().all(Option::is_some) {
            return Ok(batch.next_actions.iter().flatten().cloned().collect());
        }
        let sampled = policy.sample(&batch.next_states, rng)?;
        Ok(batch
            .next_actions
            .iter()
            .zip(sampled)
            .map(|(logged, s)| logged.clone().unwrap_or(s))
            .collect())
    }

    /// Trains the behavior model, regresses `Q` towards the value of the
    /// policy's support-restricted greedy action at `s'`, and weights
    /// supported dataset actions by their advantage over the restricted
    /// greedy action at `s`. Unsupported dataset actions get weight 0.
    pub fn bcq_update(&mut self, batch: &Batch, policy: &Policy) -> Result<CriticStep> {
        let behavior_loss = self.fit_behavior(batch)?;
        let allowed_next = self.allowed_sets(&batch.next_states)?;
        let greedy_next = policy.greedy(&batch.next_states, Some(&allowed_next))?;
        let q_next = self.target_q(&batch.next_states, &greedy_next)?;
        let targets = self.td_targets(batch, &q_next);
        let q_loss = self.fit_q(batch, &targets)?;

        let allowed = self.allowed_sets(&batch.states)?;
        let greedy = policy.greedy(&batch.states, Some(&allowed))?;
        let q_data = self.online_q(&batch.states, &batch.actions)?;
        let q_greedy = self.online_q(&batch.states, &greedy)?;
        let weights = batch
            .actions
            .iter()
            .zip(&allowed)
            .zip(q_data.iter().zip(&q_greedy))
            .map(|((a, sets), (q, qg))| {
                let supported = a.iter().zip(sets).all(|(&v, set)| set[v]);
                if supported {
                    advantage_weight(q - qg, self.config.beta_adv, self.config.w_max)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(CriticStep {
            q_loss,
            v_loss: None,
            behavior_loss: Some(behavior_loss),
            weights,
        })
    }

    fn fit_behavior(&mut self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.behavior_store.bind(&mut tape, true);
        let s = tape.constant(batch.states.clone());
        let l = self.behavior.forward(&mut tape, &p, s)?;
        let l = tape.reshape(l, &[batch.len() * self.n, self.m])?;
        let targets: Vec<usize> = batch.actions.iter().flatten().copied().collect();
        let ce = tape.cross_entropy(l, &targets)?;
        let loss = tape.mean(ce)?;
        let value = tape.value(loss).item() * self.n as f64;
        let grads = tape.backward(loss)?;
        let g = self.behavior_store.gradients(&p, &grads);
        self.behavior_opt.step(&mut self.behavior_store, &g)?;
        Ok(value)
    }

    /// Dispatches on the configured algorithm.
    pub fn update(&mut self, batch: &Batch, policy: &Policy, rng: &mut Rng) -> Result<CriticStep> {
        match self.config.algo {
            Algo::Iql => self.iql_update(batch),
            Algo::Awac => self.awac_update(batch, policy, rng),
            Algo::Bcq => self.bcq_update(batch, policy),
        }
    }
}

/// `p_v >= threshold * max_v' p_v'`.
pub fn support_mask(probs: &[f64], threshold: f64) -> Vec<bool> {
    let mx = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    probs.iter().map(|&p| p >= threshold * mx).collect()
}

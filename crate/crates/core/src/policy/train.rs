//! Actor updates, the offline training loop and greedy evaluation.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::actor::{Features, Policy};
use super::critic::{Algo, AlgoConfig, Batch, Critic};
use crate::asm::state_batch;
use crate::envs::{EnvSpec, Episode, OfflineDataset};
use crate::error::{Error, Result};
use crate::numerics::rng::{stream, substream};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};

/// Adam state for the policy and, end-to-end, its encoder.
#[derive(Clone, Debug)]
pub struct ActorOptimizer {
    own: Adam,
    joint: Option<Adam>,
}

impl ActorOptimizer {
    pub fn new(policy: &Policy, lr: f64) -> Self {
        let cfg = AdamConfig::with_lr(lr);
        ActorOptimizer {
            own: Adam::new(cfg, &policy.store),
            joint: policy.joint_store().map(|s| Adam::new(cfg, s)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorStep {
    pub loss: f64,
    /// L2 norm of gradient reaching frozen feature weights; always 0.
    pub frozen_grad_norm: f64,
}

/// One step on `mean_b(-w_b log pi(a_b | s_b))`.
pub fn actor_update(policy: &mut Policy, opt: &mut ActorOptimizer, states: &Tensor, actions: &[Vec<usize>], weights: &[f64]) -> Result<ActorStep> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Contract(format!("actor weights must be non-negative, got {w}")));
    }
    if weights.len() != actions.len() {
        return Err(Error::dim("actor_update", &[actions.len()], &[weights.len()]));
    }
    let mut tape = Tape::new();
    let pb = policy.bind(&mut tape, true);
    let s = tape.constant(states.clone());
    let lp = policy.log_prob(&mut tape, &pb, s, actions)?;
    let scale: Vec<f64> = weights.iter().map(|w| -w / actions.len() as f64).collect();
    let weighted = tape.mul_const(lp, scale)?;
    let loss = tape.sum(weighted)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;

    let frozen = matches!(policy.features(), Some(Features::Frozen(_) | Features::Student(_)));
    let mut frozen_sq = 0.0;
    if let (true, Some(pf)) = (frozen, &pb.features) {
        for &v in pf.vars() {
            if let Some(g) = grads.get(v) {
                frozen_sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        if frozen_sq != 0.0 {
            return Err(Error::Contract("gradient reached frozen feature weights".into()));
        }
    }
    let g = policy.store.gradients(&pb.own, &grads);
    opt.own.step(&mut policy.store, &g)?;
    if let (Some(adam), Some(pf)) = (opt.joint.as_mut(), pb.features.as_ref()) {
        let store = policy.joint_store_mut().expect("joint optimizer implies joint encoder");
        let g = store.gradients(pf, &grads);
        adam.step(store, &g)?;
    }
    Ok(ActorStep {
        loss: value,
        frozen_grad_norm: frozen_sq.sqrt(),
    })
}

/// Gathers transitions `idx` into a [`Batch`].
pub fn make_batch(data: &OfflineDataset, idx: &[usize]) -> Result<Batch> {
    let sd = data.manifest.env.state_dim;
    let t = &data.transitions;
    Ok(Batch {
        states: state_batch(idx.iter().map(|&i| t[i].s.as_slice()), sd)?,
        actions: idx.iter().map(|&i| t[i].a.clone()).collect(),
        rewards: idx.iter().map(|&i| t[i].r).collect(),
        next_states: state_batch(idx.iter().map(|&i| t[i].s_next.as_slice()), sd)?,
        dones: idx.iter().map(|&i| t[i].done).collect(),
        next_actions: idx.iter().map(|&i| data.successor(i).map(|j| t[j].a.clone())).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Greedy rollouts of `episodes` episodes in lockstep. With a critic
/// configured for BCQ the greedy choice is restricted to supported values.
pub fn evaluate_policy(policy: &Policy, spec: &EnvSpec, episodes: usize, seed: u64, critic: Option<&Critic>) -> Result<EvalResult> {
    evaluate_with(spec, episodes, seed, |states| {
        let allowed = match critic {
            Some(c) if c.config.algo == Algo::Bcq => Some(c.allowed_sets(states)?),
            _ => None,
        };
        policy.greedy(states, allowed.as_ref())
    })
}

/// Rollouts driven by an arbitrary batched controller.
pub fn evaluate_with(spec: &EnvSpec, episodes: usize, seed: u64, mut act: impl FnMut(&Tensor) -> Result<Vec<Vec<usize>>>) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut rngs: Vec<_> = (0..episodes as u64).map(|e| substream(seed, "eval/episode", e)).collect();
    let mut envs: Vec<Episode> = rngs.iter_mut().map(|r| Episode::reset(spec, r)).collect();
    let mut returns = vec![0.0; episodes];
    while envs.iter().any(|e| !e.is_done()) {
        let live: Vec<usize> = (0..episodes).filter(|&e| !envs[e].is_done()).collect();
        let states = state_batch(live.iter().map(|&e| envs[e].state()), spec.state_dim())?;
        let actions = act(&states)?;
        for (&e, a) in live.iter().zip(&actions) {
            returns[e] += envs[e].step(a, &mut rngs[e])?.reward;
        }
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok(EvalResult {
        mean,
        std: var.sqrt(),
        returns,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: AlgoConfig,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Steps evaluated in addition to the regular interval.
    #[serde(default)]
    pub extra_eval_steps: Vec<usize>,
    pub seed: u64,
}

/// One line of `metrics.jsonl`. Losses are means over the steps since the
/// previous record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub step: usize,
    pub wall_clock_s: f64,
    pub actor_loss: Option<f64>,
    pub q_loss: Option<f64>,
    pub v_loss: Option<f64>,
    pub behavior_loss: Option<f64>,
    pub weight_mean: Option<f64>,
    pub weight_max: Option<f64>,
    pub frozen_grad_norm: f64,
    pub eval_mean: f64,
    pub eval_std: f64,
}

#[derive(Default)]
struct Window {
    steps: usize,
    actor: f64,
    q: f64,
    v: Option<f64>,
    behavior: Option<f64>,
    w_sum: f64,
    w_count: usize,
    w_max: f64,
    frozen_sq: f64,
}

impl Window {
    fn mean(&self, x: f64) -> Option<f64> {
        (self.steps > 0).then(|| x / self.steps as f64)
    }
}

/// Offline actor-critic training. Evaluates at step 0 and every
/// `eval_interval` steps, at each of `extra_eval_steps` and at the final
/// step, passing each record to
/// `on_record` as it is produced.
pub fn train_policy(
    policy: &mut Policy,
    critic: &mut Critic,
    data: &OfflineDataset,
    spec: &EnvSpec,
    config: &TrainConfig,
    run_id: &str,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    config.algo.validate()?;
    if data.is_empty() || config.eval_interval == 0 {
        return Err(Error::Config("training needs data and a positive eval interval".into()));
    }
    let start = Instant::now();
    let mut opt = ActorOptimizer::new(policy, config.algo.actor_lr);
    let mut batch_rng = stream(config.seed, "train/batch");
    let mut sample_rng = stream(config.seed, "train/policy-samples");
    let eval_seed = config.seed ^ 0x5eed_e7a1;
    let mut records = Vec::new();
    let mut window = Window::default();
    let mut record = |step: usize, window: &mut Window, policy: &Policy, critic: &Critic, records: &mut Vec<MetricsRecord>| -> Result<()> {
        let eval = evaluate_policy(policy, spec, config.eval_episodes, eval_seed, Some(critic))?;
        let r = MetricsRecord {
            run_id: run_id.to_string(),
            step,
            wall_clock_s: start.elapsed().as_secs_f64(),
            actor_loss: window.mean(window.actor),
            q_loss: window.mean(window.q),
            v_loss: window.v.and_then(|v| window.mean(v)),
            behavior_loss: window.behavior.and_then(|v| window.mean(v)),
            weight_mean: (window.w_count > 0).then(|| window.w_sum / window.w_count as f64),
            weight_max: (window.w_count > 0).then_some(window.w_max),
            frozen_grad_norm: window.frozen_sq.sqrt(),
            eval_mean: eval.mean,
            eval_std: eval.std,
        };
        on_record(&r)?;
        records.push(r);
        *window = Window::default();
        Ok(())
    };
    record(0, &mut window, policy, critic, &mut records)?;
    let total = config.algo.steps;
    for step in 1..=total {
        let idx: Vec<usize> = (0..config.algo.batch_size).map(|_| batch_rng.random_range(0..data.len())).collect();
        let batch = make_batch(data, &idx)?;
        let cs = critic.update(&batch, policy, &mut sample_rng)?;
        let a = actor_update(policy, &mut opt, &batch.states, &batch.actions, &cs.weights)?;
        window.steps += 1;
        window.actor += a.loss;
        window.q += cs.q_loss;
        if let Some(v) = cs.v_loss {
            *window.v.get_or_insert(0.0) += v;
        }
        if let Some(b) = cs.behavior_loss {
            *window.behavior.get_or_insert(0.0) += b;
        }
        window.w_sum += cs.weights.iter().sum::<f64>();
        window.w_count += cs.weights.len();
        window.w_max = cs.weights.iter().copied().fold(window.w_max, f64::max);
        window.frozen_sq += a.frozen_grad_norm.powi(2);
        if step % config.eval_interval == 0 || step == total || config.extra_eval_steps.contains(&step) {
            record(step, &mut window, policy, critic, &mut records)?;
        }
    }
    Ok(records)
}

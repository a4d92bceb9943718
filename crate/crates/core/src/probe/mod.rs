//! Linear probes on frozen representations: per-slot and exact-match action
//! prediction, compared against the product of per-slot accuracies.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::asm::state_batch;
use crate::envs::{OfflineDataset, Transition};
use crate::error::{Error, Result};
use crate::numerics::rng::{stream, substream};
use crate::policy::{actor_update, ActorOptimizer, Features, Policy};

/// Which representation a probe was fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    Pretrained(usize),
    Random,
    Student,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Representation::Pretrained(k) => write!(f, "pretrained_epoch_{k}"),
            Representation::Random => f.write_str("random"),
            Representation::Student => f.write_str("student"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of episodes used for fitting; the rest is held out.
    pub fit_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 256,
            fit_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub representation: String,
    pub dataset_size: usize,
    pub n: usize,
    pub m: usize,
    /// Accuracy of each slot on its own.
    pub slot_accuracy: Vec<f64>,
    /// Mean of `slot_accuracy`.
    pub per_slot_accuracy: f64,
    pub exact_match_accuracy: f64,
    pub exact_matches: usize,
    /// Product of the per-slot accuracies.
    pub independence_product: f64,
    /// `log10(m^-N)`.
    pub log10_chance_baseline: f64,
}

impl ProbeReport {
    /// Scores predicted joint actions against labels.
    pub fn from_predictions(predictions: &[Vec<usize>], labels: &[Vec<usize>], m: usize, representation: &str) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("probe evaluation split is empty".into()));
        }
        if predictions.len() != labels.len() {
            return Err(Error::dim("probe", &[labels.len()], &[predictions.len()]));
        }
        let n = labels[0].len();
        let mut hits = vec![0usize; n];
        let mut exact = 0;
        for (p, l) in predictions.iter().zip(labels) {
            if p.len() != n || l.len() != n {
                return Err(Error::dim("probe", &[n], &[p.len().max(l.len())]));
            }
            let mut all = true;
            for (i, (a, b)) in p.iter().zip(l).enumerate() {
                if a == b {
                    hits[i] += 1;
                } else {
                    all = false;
                }
            }
            exact += all as usize;
        }
        let total = labels.len() as f64;
        let slot_accuracy: Vec<f64> = hits.iter().map(|&h| h as f64 / total).collect();
        Ok(ProbeReport {
            representation: representation.to_string(),
            dataset_size: labels.len(),
            n,
            m,
            per_slot_accuracy: slot_accuracy.iter().sum::<f64>() / n as f64,
            independence_product: independence_product(&slot_accuracy),
            slot_accuracy,
            exact_match_accuracy: exact as f64 / total,
            exact_matches: exact,
            log10_chance_baseline: log10_chance(n, m),
        })
    }

    /// Exact-match accuracy over the independence product.
    pub fn dependency_ratio(&self) -> f64 {
        self.exact_match_accuracy / self.independence_product
    }

    /// One-sided binomial p-value for observing at least this many exact
    /// matches if joint correctness had probability `independence_product`.
    pub fn dependency_p_value(&self) -> f64 {
        binomial_upper_tail(self.exact_matches as u64, self.dataset_size as u64, self.independence_product)
    }
}

pub fn independence_product(slot_accuracy: &[f64]) -> f64 {
    slot_accuracy.iter().product()
}

/// `log10(m^-N)`; `m^-N` itself underflows quickly.
pub fn log10_chance(n: usize, m: usize) -> f64 {
    -(n as f64) * (m as f64).log10()
}

/// `P(X >= k)` for `X ~ Binomial(trials, p)`.
pub fn binomial_upper_tail(k: u64, trials: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    match Binomial::new(p.clamp(0.0, 1.0), trials) {
        Ok(b) => b.sf(k - 1),
        Err(_) => f64::NAN,
    }
}

/// Seeded split of whole episodes into fit and held-out parts.
pub fn split_by_episode(data: &OfflineDataset, fit_fraction: f64, seed: u64) -> Result<(OfflineDataset, OfflineDataset)> {
    if !(0.0..1.0).contains(&fit_fraction) || fit_fraction == 0.0 {
        return Err(Error::Config(format!("fit fraction must lie in (0, 1), got {fit_fraction}")));
    }
    let mut episodes: Vec<usize> = (0..data.episodes().len()).collect();
    episodes.shuffle(&mut stream(seed, "probe/split"));
    let cut = ((episodes.len() as f64) * fit_fraction).round() as usize;
    let (fit, held) = episodes.split_at(cut.min(episodes.len()));
    let (mut fit, mut held) = (fit.to_vec(), held.to_vec());
    fit.sort_unstable();
    held.sort_unstable();
    Ok((data.subset_episodes(&fit), data.subset_episodes(&held)))
}

/// A fitted probe: linear slot heads (and queries, for encoders) over a
/// frozen representation.
#[derive(Clone, Debug)]
pub struct Probe {
    pub policy: Policy,
    pub representation: Representation,
    pub curve: Vec<f64>,
}

/// Trains fresh probe parameters by per-slot cross-entropy.
pub fn fit_probe(features: Features, m: usize, representation: Representation, data: &[Transition], config: &ProbeConfig) -> Result<Probe> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("probe fitting needs data and a positive batch size".into()));
    }
    let mut policy = Policy::linear_probe(features, m, config.seed)?;
    let mut opt = ActorOptimizer::new(&policy, config.lr);
    let sd = policy.state_dim;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut substream(config.seed, "probe/shuffle", epoch as u64));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let states = state_batch(chunk.iter().map(|&i| data[i].s.as_slice()), sd)?;
            let actions: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].a.clone()).collect();
            let step = actor_update(&mut policy, &mut opt, &states, &actions, &vec![1.0; chunk.len()])?;
            total += step.loss;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    Ok(Probe {
        policy,
        representation,
        curve,
    })
}

/// Greedy per-slot predictions on a held-out split.
pub fn eval_probe(probe: &Probe, data: &[Transition]) -> Result<ProbeReport> {
    if data.is_empty() {
        return Err(Error::Config("probe evaluation split is empty".into()));
    }
    let sd = probe.policy.state_dim;
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.chunks(512) {
        let states = state_batch(chunk.iter().map(|t| t.s.as_slice()), sd)?;
        predictions.extend(probe.policy.greedy(&states, None)?);
    }
    let labels: Vec<Vec<usize>> = data.iter().map(|t| t.a.clone()).collect();
    ProbeReport::from_predictions(&predictions, &labels, probe.policy.m, &probe.representation.to_string())
}

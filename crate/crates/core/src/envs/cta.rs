//! Coupled target assembly: a family of small MDPs whose reward favours
//! joint actions that match a state-dependent target pattern in every slot.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::{standard_normal, stream, Rng};

/// Construction parameters; the frozen matrices are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    /// Number of sub-action slots.
    pub n: usize,
    /// Cardinality of every slot.
    pub m: usize,
    pub state_dim: usize,
    pub horizon: usize,
    pub kappa: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            n: 8,
            m: 5,
            state_dim: 12,
            horizon: 20,
            kappa: 0.9,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl EnvParams {
    /// Parses `cta-n{N}m{m}` with optional `-k{kappa}` and `-s{seed}` suffixes.
    pub fn from_preset(name: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown environment preset `{name}`"));
        let rest = name.strip_prefix("cta-n").ok_or_else(bad)?;
        let mut parts = rest.split('-');
        let nm = parts.next().ok_or_else(bad)?;
        let (n, m) = nm.split_once('m').ok_or_else(bad)?;
        let mut p = EnvParams {
            n: n.parse().map_err(|_| bad())?,
            m: m.parse().map_err(|_| bad())?,
            ..Default::default()
        };
        for part in parts {
            if let Some(k) = part.strip_prefix('k') {
                p.kappa = k.parse().map_err(|_| bad())?;
            } else if let Some(s) = part.strip_prefix('s') {
                p.seed = s.parse().map_err(|_| bad())?;
            } else {
                return Err(bad());
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 2 || self.horizon < 1 || self.state_dim < 1 {
            return Err(Error::Config(format!(
                "environment needs n >= 2, m >= 2, horizon >= 1, state_dim >= 1 (got {self:?})"
            )));
        }
        if !(0.0..=1.0).contains(&self.kappa) || self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "kappa must lie in [0, 1] and noise_std must be >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Size of the joint action space `m^n`, exact while it fits below `2^63`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionSpaceSize {
    Exact(u64),
    Log10(f64),
}

impl ActionSpaceSize {
    pub fn of(n: usize, m: usize) -> Self {
        let mut total: u64 = 1;
        for _ in 0..n {
            match total.checked_mul(m as u64) {
                Some(t) if t <= 1 << 63 => total = t,
                _ => return ActionSpaceSize::Log10(n as f64 * (m as f64).log10()),
            }
        }
        ActionSpaceSize::Exact(total)
    }

    pub fn log10(&self) -> f64 {
        match *self {
            ActionSpaceSize::Exact(v) => (v as f64).log10(),
            ActionSpaceSize::Log10(l) => l,
        }
    }
}

impl fmt::Display for ActionSpaceSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ActionSpaceSize::Exact(v) => write!(f, "{v}"),
            ActionSpaceSize::Log10(l) => {
                let exp = l.floor();
                write!(f, "{:.2}e{}", 10f64.powf(l - exp), exp as i64)
            }
        }
    }
}

/// A fully constructed environment. Immutable after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub params: EnvParams,
    /// Target map `W_t`, `[n, state_dim]` row-major.
    target_map: Vec<f64>,
    /// Dynamics matrix `W_s`, `[state_dim, state_dim]` row-major.
    dyn_map: Vec<f64>,
    /// Per-coordinate response to the match fraction.
    dyn_action: Vec<f64>,
    dyn_bias: Vec<f64>,
}

impl EnvSpec {
    pub fn new(params: EnvParams) -> Result<Self> {
        params.validate()?;
        let (n, s) = (params.n, params.state_dim);
        let mut rng = stream(params.seed, "env/target_map");
        let target_scale = 3.0 / (s as f64).sqrt();
        let target_map = (0..n * s).map(|_| target_scale * standard_normal(&mut rng)).collect();
        let mut rng = stream(params.seed, "env/dyn_map");
        let dyn_scale = 1.2 / (s as f64).sqrt();
        let dyn_map = (0..s * s).map(|_| dyn_scale * standard_normal(&mut rng)).collect();
        let mut rng = stream(params.seed, "env/dyn_action");
        let dyn_action = (0..s).map(|_| standard_normal(&mut rng)).collect();
        let mut rng = stream(params.seed, "env/dyn_bias");
        let dyn_bias = (0..s).map(|_| 0.3 * standard_normal(&mut rng)).collect();
        Ok(EnvSpec {
            params,
            target_map,
            dyn_map,
            dyn_action,
            dyn_bias,
        })
    }

    /// Builds a spec from explicit matrices (used for hand-made instances).
    pub fn from_parts(
        params: EnvParams,
        target_map: Vec<f64>,
        dyn_map: Vec<f64>,
        dyn_action: Vec<f64>,
        dyn_bias: Vec<f64>,
    ) -> Result<Self> {
        params.validate()?;
        let (n, s) = (params.n, params.state_dim);
        if target_map.len() != n * s || dyn_map.len() != s * s || dyn_action.len() != s || dyn_bias.len() != s {
            return Err(Error::Config("matrix sizes do not match the environment parameters".into()));
        }
        Ok(EnvSpec {
            params,
            target_map,
            dyn_map,
            dyn_action,
            dyn_bias,
        })
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn m(&self) -> usize {
        self.params.m
    }

    pub fn state_dim(&self) -> usize {
        self.params.state_dim
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    pub fn action_space_size(&self) -> ActionSpaceSize {
        ActionSpaceSize::of(self.params.n, self.params.m)
    }

    /// SHA-256 over the canonical JSON form, including the frozen matrices.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Returns a copy with a different coupling weight (same dynamics and targets).
    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        let mut out = self.clone();
        out.params.kappa = kappa;
        out.params.validate()?;
        Ok(out)
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.params.state_dim {
            return Err(Error::dim("state", &[self.params.state_dim], &[s.len()]));
        }
        Ok(())
    }

    pub fn check_action(&self, a: &[usize]) -> Result<()> {
        if a.len() != self.params.n {
            return Err(Error::dim("action", &[self.params.n], &[a.len()]));
        }
        if let Some(&bad) = a.iter().find(|&&v| v >= self.params.m) {
            return Err(Error::Index {
                op: "action",
                index: bad,
                bound: self.params.m,
            });
        }
        Ok(())
    }

    /// Target pattern `t_i(s) = floor(m * sigmoid(<W_t[i], s>))`, clamped to `m - 1`.
    pub fn target_pattern(&self, s: &[f64]) -> Vec<usize> {
        let (sd, m) = (self.params.state_dim, self.params.m);
        self.target_map
            .chunks(sd)
            .map(|row| {
                let logit: f64 = row.iter().zip(s).map(|(w, x)| w * x).sum();
                let p = 1.0 / (1.0 + (-logit).exp());
                ((m as f64 * p).floor() as usize).min(m - 1)
            })
            .collect()
    }

    /// Fraction of slots that match the target pattern.
    pub fn match_fraction(&self, s: &[f64], a: &[usize]) -> f64 {
        let t = self.target_pattern(s);
        t.iter().zip(a).filter(|(x, y)| x == y).count() as f64 / self.params.n as f64
    }

    /// `(1 - kappa) * match_fraction + kappa * 1[a == t(s)]`.
    pub fn reward(&self, s: &[f64], a: &[usize]) -> Result<f64> {
        self.check_state(s)?;
        self.check_action(a)?;
        let frac = self.match_fraction(s, a);
        let full = if frac == 1.0 { 1.0 } else { 0.0 };
        let k = self.params.kappa;
        Ok((1.0 - k) * frac + k * full)
    }

    /// Next state `tanh(W_s s + u * match_fraction + b) + noise`.
    pub fn transition(&self, s: &[f64], a: &[usize], rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_action(a)?;
        let frac = self.match_fraction(s, a);
        let sd = self.params.state_dim;
        let out = (0..sd)
            .map(|j| {
                let row = &self.dyn_map[j * sd..(j + 1) * sd];
                let pre: f64 = row.iter().zip(s).map(|(w, x)| w * x).sum::<f64>()
                    + self.dyn_action[j] * frac
                    + self.dyn_bias[j];
                let noise = if self.params.noise_std > 0.0 {
                    self.params.noise_std * standard_normal(rng)
                } else {
                    0.0
                };
                pre.tanh() + noise
            })
            .collect();
        Ok(out)
    }

    /// Initial-state distribution: uniform on `[-1, 1]^state_dim`.
    pub fn initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.params.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub s_next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A rollout in progress; `done` once `horizon` steps have been taken.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    spec: &'a EnvSpec,
    state: Vec<f64>,
    steps: usize,
}

impl<'a> Episode<'a> {
    pub fn reset(spec: &'a EnvSpec, rng: &mut Rng) -> Self {
        Episode {
            spec,
            state: spec.initial_state(rng),
            steps: 0,
        }
    }

    pub fn from_state(spec: &'a EnvSpec, state: Vec<f64>) -> Self {
        Episode { spec, state, steps: 0 }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.steps >= self.spec.params.horizon
    }

    pub fn step(&mut self, a: &[usize], rng: &mut Rng) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let reward = self.spec.reward(&self.state, a)?;
        let s_next = self.spec.transition(&self.state, a, rng)?;
        self.steps += 1;
        self.state = s_next.clone();
        Ok(StepOutcome {
            s_next,
            reward,
            done: self.is_done(),
        })
    }
}

//! Experiment configuration: one JSON document with a fixed schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spin_core::asm::{AsmConfig, ObjectiveKind, PretrainConfig};
use spin_core::distill::DistillConfig;
use spin_core::envs::dataset::validate_mix;
use spin_core::envs::{EnvParams, Tier};
use spin_core::policy::{AlgoConfig, HeadInit, Method};
use spin_core::probe::ProbeConfig;
use spin_core::{Error, Result};

/// Encoder architecture; slot count, cardinality and state size come from
/// the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsmArch {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub state_tokens: usize,
    pub p_mask: f64,
    pub corruption: [f64; 3],
    pub ff_mult: usize,
}

impl Default for AsmArch {
    fn default() -> Self {
        let c = AsmConfig::new(1, 2, 1);
        AsmArch {
            d: c.d,
            layers: c.layers,
            heads: c.heads,
            state_tokens: c.state_tokens,
            p_mask: c.p_mask,
            corruption: c.corruption,
            ff_mult: c.ff_mult,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub objective: ObjectiveKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Checkpoints are written every this many epochs, plus epoch 0 and the
    /// final epoch.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            objective: ObjectiveKind::Mam,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            checkpoint_every: 10,
            seed: p.seed,
        }
    }
}

impl PretrainSection {
    pub fn marks(&self) -> Vec<usize> {
        let every = self.checkpoint_every.max(1);
        let mut marks: Vec<usize> = (0..=self.epochs).filter(|k| k % every == 0).collect();
        if marks.last() != Some(&self.epochs) {
            marks.push(self.epochs);
        }
        marks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvParams,
    pub tier_mix: BTreeMap<Tier, f64>,
    /// Dataset size Z in transitions.
    pub dataset_size: usize,
    pub data_seed: u64,
    pub asm: AsmArch,
    pub pretrain: PretrainSection,
    /// Critic and actor settings; `algo.steps` is the policy-training budget.
    pub algo: AlgoConfig,
    pub method: Method,
    /// Pre-training checkpoint used by `spin`, `spin_distill` and probes;
    /// defaults to the final pre-training epoch.
    pub asm_epoch: Option<usize>,
    pub head_init: HeadInit,
    /// Hidden width of the factored and autoregressive baselines; defaults
    /// to `2 * asm.d`.
    pub baseline_hidden: Option<usize>,
    /// Generation order of the autoregressive baseline; defaults to `0..N`.
    pub slot_order: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub distill: DistillSection,
    pub probe: ProbeConfig,
    /// Early-adaptation checkpoint as a fraction of `algo.steps`.
    pub early_fraction: f64,
    /// Method whose asymptote defines the time-to-target threshold.
    pub target_method: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvParams::default(),
            tier_mix: BTreeMap::from([(Tier::Medium, 0.5), (Tier::Expert, 0.5)]),
            dataset_size: 20_000,
            data_seed: 0,
            asm: AsmArch::default(),
            pretrain: PretrainSection::default(),
            algo: AlgoConfig::default(),
            method: Method::Spin,
            asm_epoch: None,
            head_init: HeadInit::Fresh,
            baseline_hidden: None,
            slot_order: None,
            seeds: vec![0, 1, 2, 3, 4],
            eval_interval: 10_000,
            eval_episodes: 20,
            distill: DistillSection::default(),
            probe: ProbeConfig::default(),
            early_fraction: 0.01,
            target_method: Method::Factored.as_str().to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        validate_mix(&self.tier_mix)?;
        self.asm_config().validate()?;
        self.algo.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.dataset_size == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("dataset_size, eval_interval and eval_episodes must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || self.distill.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.early_fraction) {
            return Err(Error::Config(format!("early_fraction {} outside [0, 1]", self.early_fraction)));
        }
        if self.asm_epoch.is_some_and(|k| k > self.pretrain.epochs) {
            return Err(Error::Config("asm_epoch exceeds pre-training epochs".into()));
        }
        Ok(())
    }

    pub fn asm_config(&self) -> AsmConfig {
        let a = &self.asm;
        AsmConfig {
            d: a.d,
            layers: a.layers,
            heads: a.heads,
            state_tokens: a.state_tokens,
            p_mask: a.p_mask,
            corruption: a.corruption,
            ff_mult: a.ff_mult,
            ..AsmConfig::new(self.env.n, self.env.m, self.env.state_dim)
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: p.seed,
        }
    }

    pub fn distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            epochs: self.distill.epochs,
            batch_size: self.distill.batch_size,
            lr: self.distill.lr,
            seed,
        }
    }

    pub fn asm_epoch(&self) -> usize {
        self.asm_epoch.unwrap_or(self.pretrain.epochs)
    }

    pub fn baseline_hidden(&self) -> usize {
        self.baseline_hidden.unwrap_or(2 * self.asm.d)
    }

    /// Training step at which early adaptation is measured.
    pub fn early_checkpoint(&self) -> usize {
        (self.early_fraction * self.algo.steps as f64).round() as usize
    }

    /// Directory name of this configuration's policy runs.
    pub fn run_label(&self) -> String {
        match self.method {
            Method::Spin | Method::SpinDistill => format!("{}_{}_ep{}", self.method, self.pretrain.objective.as_str(), self.asm_epoch()),
            m => m.as_str().to_string(),
        }
    }
}

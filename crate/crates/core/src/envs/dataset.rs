//! Offline datasets: generation from tiered behavior policies and the
//! JSON-Lines file format (manifest line first, then one transition per line).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::behavior::{behavior_action, Tier, MEDIUM_CORRUPTION};
use super::cta::{EnvParams, EnvSpec, Episode};
use crate::error::{Error, Result};
use crate::numerics::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<usize>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub env: EnvParams,
    pub env_hash: String,
    pub tier_mix: BTreeMap<Tier, f64>,
    pub size: usize,
    pub seed: u64,
    pub medium_corruption: f64,
    /// Behavior tier of every episode, in file order.
    pub episode_tiers: Vec<Tier>,
    /// Transition count per tier.
    pub tier_counts: BTreeMap<Tier, usize>,
    /// SHA-256 over the serialized transition lines.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub manifest: Manifest,
    pub transitions: Vec<Transition>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    #[serde(rename = "__manifest__")]
    manifest: Manifest,
}

/// Parses `expert=0.5,medium=0.5` style mixes.
pub fn parse_tier_mix(text: &str) -> Result<BTreeMap<Tier, f64>> {
    let mut mix = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (tier, frac) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("tier mix entry `{part}` is not tier=fraction")))?;
        let frac: f64 = frac
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fraction in `{part}`")))?;
        if mix.insert(tier.trim().parse::<Tier>()?, frac).is_some() {
            return Err(Error::Config(format!("tier `{tier}` listed twice")));
        }
    }
    validate_mix(&mix)?;
    Ok(mix)
}

pub fn validate_mix(mix: &BTreeMap<Tier, f64>) -> Result<()> {
    if mix.is_empty() || mix.values().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config("tier fractions must be non-negative and non-empty".into()));
    }
    let total: f64 = mix.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("tier fractions sum to {total}, expected 1")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `episodes` across tiers.
fn apportion(mix: &BTreeMap<Tier, f64>, episodes: usize) -> Vec<(Tier, usize)> {
    let mut alloc: Vec<(Tier, usize, f64)> = mix
        .iter()
        .map(|(&t, &f)| {
            let exact = f * episodes as f64;
            (t, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.1).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&i, &j| alloc[j].2.total_cmp(&alloc[i].2).then(i.cmp(&j)));
    for &i in order.iter().take(episodes.saturating_sub(assigned)) {
        alloc[i].1 += 1;
    }
    alloc.into_iter().map(|(t, c, _)| (t, c)).collect()
}

fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

fn fmt_vec(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_f64(out, *x);
    }
    out.push(']');
}

/// One JSON object per transition, numbers with 17 significant digits.
fn transition_line(t: &Transition) -> String {
    let mut out = String::with_capacity(64 + 48 * t.s.len());
    out.push_str("{\"s\":");
    fmt_vec(&mut out, &t.s);
    out.push_str(",\"a\":[");
    for (i, a) in t.a.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{a}").expect("write to string");
    }
    out.push_str("],\"r\":");
    fmt_f64(&mut out, t.r);
    out.push_str(",\"s_next\":");
    fmt_vec(&mut out, &t.s_next);
    write!(out, ",\"done\":{}}}", t.done).expect("write to string");
    out
}

fn content_hash(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Generates whole episodes per tier in the requested proportions. The
/// episode count is `ceil(size / horizon)`; the final episode is cut short
/// when `size` is not a multiple of the horizon.
pub fn generate_dataset(spec: &EnvSpec, tier_mix: &BTreeMap<Tier, f64>, size: usize, seed: u64) -> Result<OfflineDataset> {
    validate_mix(tier_mix)?;
    if size == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let h = spec.horizon();
    let episodes = size.div_ceil(h);
    let plan = apportion(tier_mix, episodes);
    let mut transitions = Vec::with_capacity(size);
    let mut episode_tiers = Vec::with_capacity(episodes);
    let mut tier_counts: BTreeMap<Tier, usize> = tier_mix.keys().map(|&t| (t, 0)).collect();
    for (tier, count) in plan {
        for _ in 0..count {
            let idx = episode_tiers.len() as u64;
            episode_tiers.push(tier);
            let mut init_rng = substream(seed, "dataset/init", idx);
            let mut act_rng = substream(seed, "dataset/behavior", idx);
            let mut dyn_rng = substream(seed, "dataset/dynamics", idx);
            let mut ep = Episode::reset(spec, &mut init_rng);
            while !ep.is_done() && transitions.len() < size {
                let s = ep.state().to_vec();
                let a = behavior_action(spec, &s, tier, &mut act_rng);
                let out = ep.step(&a, &mut dyn_rng)?;
                transitions.push(Transition {
                    s,
                    a,
                    r: out.reward,
                    s_next: out.s_next,
                    done: out.done,
                });
                *tier_counts.get_mut(&tier).expect("tier present") += 1;
            }
        }
    }
    let lines: Vec<String> = transitions.iter().map(transition_line).collect();
    let manifest = Manifest {
        env: spec.params.clone(),
        env_hash: spec.hash(),
        tier_mix: tier_mix.clone(),
        size,
        seed,
        medium_corruption: MEDIUM_CORRUPTION,
        episode_tiers,
        tier_counts,
        content_hash: content_hash(&lines),
    };
    Ok(OfflineDataset { manifest, transitions })
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Contiguous index ranges of each episode, split after `done`.
    pub fn episodes(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.done {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.transitions.len() {
            out.push(start..self.transitions.len());
        }
        out
    }

    /// Index of the transition that follows `i` within its episode.
    pub fn successor(&self, i: usize) -> Option<usize> {
        (!self.transitions[i].done && i + 1 < self.transitions.len()).then_some(i + 1)
    }

    /// Mean per-step reward.
    pub fn mean_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum::<f64>() / self.len().max(1) as f64
    }

    /// Keeps only the listed episodes (by index into [`episodes`](Self::episodes)).
    pub fn subset_episodes(&self, keep: &[usize]) -> OfflineDataset {
        let ranges = self.episodes();
        let mut transitions = Vec::new();
        for &e in keep {
            transitions.extend_from_slice(&self.transitions[ranges[e].clone()]);
        }
        OfflineDataset {
            manifest: self.manifest.clone(),
            transitions,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestLine {
            manifest: self.manifest.clone(),
        })
        .expect("manifest serializes");
        out.push('\n');
        for t in &self.transitions {
            out.push_str(&transition_line(t));
            out.push('\n');
        }
        out
    }

    /// Parses the JSON-Lines form, verifying shape, count and content hash.
    /// When `expected` is given, the manifest's environment hash must match it.
    pub fn from_jsonl(text: &str, expected: Option<&EnvSpec>) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty dataset file".into(),
        })?;
        let manifest = serde_json::from_str::<ManifestLine>(first)
            .map_err(|e| Error::Parse {
                line: 1,
                msg: format!("manifest: {e}"),
            })?
            .manifest;
        let (n, m, sd) = (manifest.env.n, manifest.env.m, manifest.env.state_dim);
        let mut transitions = Vec::with_capacity(manifest.size);
        let mut raw = Vec::with_capacity(manifest.size);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let t: Transition = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            if t.s.len() != sd || t.s_next.len() != sd || t.a.len() != n || t.a.iter().any(|&v| v >= m) || !t.r.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "transition does not match the manifest's environment".into(),
                });
            }
            raw.push(line.to_string());
            transitions.push(t);
        }
        if transitions.len() != manifest.size {
            return Err(Error::Corruption(format!(
                "manifest promises {} transitions, file holds {}",
                manifest.size,
                transitions.len()
            )));
        }
        if content_hash(&raw) != manifest.content_hash {
            return Err(Error::Corruption("content hash mismatch".into()));
        }
        if let Some(spec) = expected {
            let want = spec.hash();
            if want != manifest.env_hash {
                return Err(Error::Incompatible(format!(
                    "dataset was generated for environment {}, caller expects {}",
                    manifest.env_hash, want
                )));
            }
        }
        Ok(OfflineDataset { manifest, transitions })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&EnvSpec>) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?, expected)
    }
}

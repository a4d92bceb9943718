//! Aggregation of finished runs into CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spin_core::policy::{AlgoConfig, Method};
use spin_core::report::{aggregate, compute_early_adaptation, compute_time_to_target, Curve, SeedCurve};
use spin_core::{Error, Result};

use crate::commands::{csv_err, read_metrics, ProbeRecord, RunManifest};
use crate::layout::{write, Workdir};

pub const LEARNING_CURVES_HEADER: [&str; 4] = ["step", "method", "mean", "std"];
pub const TIME_TO_TARGET_HEADER: [&str; 6] = ["method", "target_method", "threshold", "steps", "wall_clock_s", "reached"];
pub const EARLY_ADAPTATION_HEADER: [&str; 5] = ["method", "target_method", "checkpoint_step", "step", "percent_of_target"];
pub const PROBE_REPORTS_HEADER: [&str; 11] = [
    "representation",
    "objective",
    "kappa",
    "n",
    "m",
    "dataset_size",
    "per_slot_accuracy",
    "exact_match_accuracy",
    "independence_product",
    "log10_chance_baseline",
    "p_value",
];
pub const PRETRAIN_SWEEP_HEADER: [&str; 5] = ["objective", "asm_epochs", "final_return_mean", "final_return_std", "seeds"];

/// One finished run as read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub curve: SeedCurve,
}

/// Per-method results of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub final_returns: Vec<f64>,
    pub final_mean: f64,
    pub final_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub methods: Vec<MethodSummary>,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

impl ReportSummary {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == label)
    }
}

/// Reads every complete run under `runs/`; incomplete ones become warnings.
pub fn load_runs(wd: &Workdir, warnings: &mut Vec<String>) -> Result<BTreeMap<String, Vec<LoadedRun>>> {
    let mut out: BTreeMap<String, Vec<LoadedRun>> = BTreeMap::new();
    let root = wd.runs();
    if !root.exists() {
        warnings.push("no runs directory".into());
        return Ok(out);
    }
    for label_dir in sorted_dirs(&root)? {
        for seed_dir in sorted_dirs(&label_dir)? {
            let shown = wd.relative(&seed_dir);
            let manifest = match RunManifest::load(&seed_dir) {
                Ok(m) => m,
                Err(_) => {
                    warnings.push(format!("{shown}: missing or unreadable manifest, skipped"));
                    continue;
                }
            };
            let records = match read_metrics(&seed_dir.join("metrics.jsonl")) {
                Ok(r) => r,
                Err(_) => {
                    warnings.push(format!("{shown}: missing or unreadable metrics, skipped"));
                    continue;
                }
            };
            if records.last().map(|r| r.step) != Some(manifest.config.algo.steps) {
                warnings.push(format!("{shown}: run did not reach step {}, skipped", manifest.config.algo.steps));
                continue;
            }
            let curve = records.iter().map(|r| (r.step, r.wall_clock_s, r.eval_mean)).collect();
            out.entry(manifest.label.clone()).or_default().push(LoadedRun { manifest, curve });
        }
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Settings every compared run must share.
#[derive(PartialEq)]
struct Controlled<'a> {
    env_hash: &'a str,
    dataset_hash: &'a str,
    critic: AlgoConfig,
}

fn controlled(run: &RunManifest) -> Controlled<'_> {
    Controlled {
        env_hash: &run.env_hash,
        dataset_hash: &run.dataset_hash,
        critic: run.config.algo.clone(),
    }
}

/// Aborts when runs differ in environment, dataset, critic settings or budget.
pub fn check_controlled(runs: &BTreeMap<String, Vec<LoadedRun>>) -> Result<()> {
    let mut all = runs.values().flatten();
    let Some(first) = all.next() else { return Ok(()) };
    let reference = controlled(&first.manifest);
    for r in all {
        let c = controlled(&r.manifest);
        let what = if c.env_hash != reference.env_hash {
            "environment"
        } else if c.dataset_hash != reference.dataset_hash {
            "dataset"
        } else if c.critic.steps != reference.critic.steps {
            "policy-training budget"
        } else if c.critic != reference.critic {
            "critic configuration"
        } else {
            continue;
        };
        return Err(Error::Config(format!(
            "uncontrolled comparison: {} seed {} differs from {} seed {} in {what}",
            r.manifest.label, r.manifest.seed, first.manifest.label, first.manifest.seed
        )));
    }
    Ok(())
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn opt<T: ToString>(x: Option<T>, missing: &str) -> String {
    x.map_or_else(|| missing.to_string(), |v| v.to_string())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// Aggregates seeds per method and writes the report files into `reports/`.
pub fn cmd_report(wd: &Workdir) -> Result<ReportSummary> {
    let mut summary = ReportSummary::default();
    let runs = load_runs(wd, &mut summary.warnings)?;
    check_controlled(&runs)?;
    let out = wd.reports();
    fs::create_dir_all(&out)?;
    let emit = |name: &str, bytes: Vec<u8>, summary: &mut ReportSummary| -> Result<()> {
        write(&out.join(name), bytes)?;
        summary.files.push(name.to_string());
        Ok(())
    };

    let mut curves = Vec::new();
    for (label, seeds) in &runs {
        let per_seed: Vec<SeedCurve> = seeds.iter().map(|r| r.curve.clone()).collect();
        let mut curve = aggregate(label, &per_seed)?;
        let k = seeds.len() as f64;
        curve.offset_steps = (seeds.iter().map(|r| r.manifest.offset_steps as f64).sum::<f64>() / k).round() as usize;
        curve.offset_wall_clock_s = seeds.iter().map(|r| r.manifest.offset_wall_clock_s).sum::<f64>() / k;
        let finals: Vec<f64> = seeds.iter().map(|r| r.curve.last().map_or(f64::NAN, |p| p.2)).collect();
        let (final_mean, final_std) = mean_std(&finals);
        summary.methods.push(MethodSummary {
            method: label.clone(),
            seeds: seeds.iter().map(|r| r.manifest.seed).collect(),
            final_returns: finals,
            final_mean,
            final_std,
        });
        curves.push(curve);
    }

    let rows = curves.iter().flat_map(|c: &Curve| {
        c.points
            .iter()
            .map(move |p| vec![p.step.to_string(), c.method.clone(), p.mean.to_string(), p.std.to_string()])
    });
    emit("learning_curves.csv", csv_bytes(&LEARNING_CURVES_HEADER, rows)?, &mut summary)?;

    let reference = runs.values().flatten().next().map(|r| r.manifest.config.clone());
    match &reference {
        Some(cfg) if runs.contains_key(&cfg.target_method) => {
            let ttt = compute_time_to_target(&curves, &cfg.target_method)?;
            let rows = ttt.iter().map(|t| {
                vec![
                    t.method.clone(),
                    t.target_method.clone(),
                    t.threshold.to_string(),
                    opt(t.steps, "not reached"),
                    opt(t.wall_clock_s, "not reached"),
                    t.reached().to_string(),
                ]
            });
            emit("time_to_target.csv", csv_bytes(&TIME_TO_TARGET_HEADER, rows)?, &mut summary)?;
            let checkpoint = cfg.early_checkpoint();
            let early = compute_early_adaptation(&curves, &cfg.target_method, checkpoint)?;
            let rows = early.iter().map(|e| {
                vec![
                    e.method.clone(),
                    e.target_method.clone(),
                    e.checkpoint_step.to_string(),
                    opt(e.step, ""),
                    opt(e.percent_of_target, ""),
                ]
            });
            emit("early_adaptation.csv", csv_bytes(&EARLY_ADAPTATION_HEADER, rows)?, &mut summary)?;
        }
        Some(cfg) => summary
            .warnings
            .push(format!("no runs of target method {}; time-to-target and early adaptation skipped", cfg.target_method)),
        None => {}
    }

    let mut sweep: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for run in runs.values().flatten().filter(|r| r.manifest.method == Method::Spin) {
        let cfg = &run.manifest.config;
        let key = (cfg.pretrain.objective.as_str().to_string(), cfg.asm_epoch());
        sweep.entry(key).or_default().push(run.curve.last().map_or(f64::NAN, |p| p.2));
    }
    if sweep.is_empty() {
        summary.warnings.push("no spin runs; pretrain sweep skipped".into());
    } else {
        let rows = sweep.iter().map(|((obj, k), finals)| {
            let (m, s) = mean_std(finals);
            vec![obj.clone(), k.to_string(), m.to_string(), s.to_string(), finals.len().to_string()]
        });
        emit("pretrain_sweep.csv", csv_bytes(&PRETRAIN_SWEEP_HEADER, rows)?, &mut summary)?;
    }

    match read_probe_records(&wd.probe_reports())? {
        Some(records) => {
            let rows = records.iter().map(|r| {
                vec![
                    r.report.representation.clone(),
                    r.objective.as_str().to_string(),
                    r.kappa.to_string(),
                    r.report.n.to_string(),
                    r.report.m.to_string(),
                    r.report.dataset_size.to_string(),
                    r.report.per_slot_accuracy.to_string(),
                    r.report.exact_match_accuracy.to_string(),
                    r.report.independence_product.to_string(),
                    r.report.log10_chance_baseline.to_string(),
                    r.p_value.to_string(),
                ]
            });
            emit("probe_reports.csv", csv_bytes(&PROBE_REPORTS_HEADER, rows)?, &mut summary)?;
        }
        None => summary.warnings.push("no probe reports; probe_reports.csv not written".into()),
    }

    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

fn read_probe_records(path: &Path) -> Result<Option<Vec<ProbeRecord>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect::<Result<Vec<_>>>()?;
    Ok((!records.is_empty()).then_some(records))
}

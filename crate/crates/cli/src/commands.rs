//! The pipeline stages behind each subcommand.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spin_core::asm::{pretrain, AsmModel, Objective, ObjectiveKind};
use spin_core::distill::{train_student, Student, Teacher};
use spin_core::envs::{generate_dataset, EnvSpec, OfflineDataset};
use spin_core::numerics::ParamStore;
use spin_core::policy::{train_policy, Critic, Features, Method, MetricsRecord, Policy, TrainConfig};
use spin_core::probe::{eval_probe, fit_probe, split_by_episode, ProbeReport, Representation};
use spin_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::layout::{ensure_parent, guard, write, Workdir};

pub const CODE_VERSION: &str = concat!("spin-lab v", env!("CARGO_PKG_VERSION"));

/// Generates the configured dataset and writes it with its manifest.
pub fn cmd_gen_data(wd: &Workdir, config: &ExperimentConfig, force: bool) -> Result<OfflineDataset> {
    let path = wd.dataset();
    guard(&path, force)?;
    let spec = EnvSpec::new(config.env.clone())?;
    let data = generate_dataset(&spec, &config.tier_mix, config.dataset_size, config.data_seed)?;
    write(&path, data.to_jsonl())?;
    write(&wd.dataset_manifest(), serde_json::to_string_pretty(&data.manifest).expect("manifest serializes"))?;
    Ok(data)
}

/// Loads the work directory's dataset, checking it belongs to the configured environment.
pub fn load_dataset(wd: &Workdir, config: &ExperimentConfig) -> Result<(EnvSpec, OfflineDataset)> {
    let spec = EnvSpec::new(config.env.clone())?;
    let path = wd.dataset();
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} not found; run gen-data first", path.display())));
    }
    let data = OfflineDataset::load(&path, Some(&spec))?;
    Ok((spec, data))
}

/// Written next to the pre-training checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub objective: ObjectiveKind,
    pub epochs: usize,
    pub marks: Vec<usize>,
    pub steps_per_epoch: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Seconds since the start of pre-training at each epoch boundary,
    /// starting with epoch 0.
    pub epoch_wall_clock_s: Vec<f64>,
    pub dataset_hash: String,
}

impl PretrainRecord {
    pub fn load(wd: &Workdir, objective: ObjectiveKind) -> Result<Self> {
        let path = wd.pretrain_log(objective);
        let text = fs::read_to_string(&path).map_err(|_| Error::Config(format!("no pre-training log at {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
    }
}

pub fn cmd_pretrain(wd: &Workdir, config: &ExperimentConfig, force: bool) -> Result<PretrainRecord> {
    let (_, data) = load_dataset(wd, config)?;
    let kind = config.pretrain.objective;
    let marks = config.pretrain.marks();
    for &k in &marks {
        guard(&wd.asm_checkpoint(kind, k), force)?;
    }
    fs::create_dir_all(wd.asm_dir(kind))?;
    let mut model = AsmModel::new(config.asm_config(), config.pretrain.seed)?;
    let mut objective = Objective::new(kind, &model, config.pretrain.seed);
    let start = Instant::now();
    let mut wall = Vec::with_capacity(config.pretrain.epochs + 1);
    let log = pretrain(&mut model, &mut objective, &data.transitions, &config.pretrain_config(), |k, m| {
        wall.push(start.elapsed().as_secs_f64());
        if marks.contains(&k) {
            m.store.save(&wd.asm_checkpoint(kind, k))?;
        }
        Ok(())
    })?;
    let record = PretrainRecord {
        objective: kind,
        epochs: config.pretrain.epochs,
        marks,
        steps_per_epoch: (log.steps as usize).checked_div(config.pretrain.epochs).unwrap_or(0),
        initial_loss: log.initial_loss,
        epoch_losses: log.epoch_losses,
        epoch_wall_clock_s: wall,
        dataset_hash: data.manifest.content_hash.clone(),
    };
    write(&wd.pretrain_log(kind), serde_json::to_string_pretty(&record).expect("log serializes"))?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["epoch", "loss"]).map_err(csv_err)?;
    for (i, l) in record.epoch_losses.iter().enumerate() {
        csv.write_record([(i + 1).to_string(), l.to_string()]).map_err(csv_err)?;
    }
    write(&wd.pretrain_loss_csv(kind), csv.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(record)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Loads the pre-trained encoder at `epoch`.
pub fn load_asm(wd: &Workdir, config: &ExperimentConfig, epoch: usize) -> Result<AsmModel> {
    let path = wd.asm_checkpoint(config.pretrain.objective, epoch);
    if !path.exists() {
        return Err(Error::Config(format!("ASM checkpoint {} not found; run pretrain first", path.display())));
    }
    AsmModel::from_store(config.asm_config(), &ParamStore::load(&path)?)
}

/// Everything needed to rerun one policy-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub label: String,
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub env_hash: String,
    pub dataset_hash: String,
    pub checkpoints: BTreeMap<String, String>,
    /// Steps and seconds spent before policy training.
    pub offset_steps: usize,
    pub offset_wall_clock_s: f64,
    pub final_eval_mean: f64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("{}: {e}", dir.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DistillRecord {
    teacher: String,
    steps: usize,
    wall_clock_s: f64,
    curve: Vec<f64>,
}

struct Built {
    policy: Policy,
    checkpoints: BTreeMap<String, String>,
    offset_steps: usize,
    offset_wall_clock_s: f64,
}

fn pretrain_offset(wd: &Workdir, config: &ExperimentConfig) -> Result<(usize, f64)> {
    let rec = PretrainRecord::load(wd, config.pretrain.objective)?;
    let k = config.asm_epoch();
    Ok((k * rec.steps_per_epoch, rec.epoch_wall_clock_s.get(k).copied().unwrap_or(0.0)))
}

fn teacher_config(config: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        method: Method::Spin,
        ..config.clone()
    }
}

fn build_policy(wd: &Workdir, config: &ExperimentConfig, seed: u64) -> Result<Built> {
    let (n, m, s) = (config.env.n, config.env.m, config.env.state_dim);
    let mut checkpoints = BTreeMap::new();
    let (mut offset_steps, mut offset_wall) = (0, 0.0);
    let policy = match config.method {
        Method::Spin => {
            let k = config.asm_epoch();
            let asm = load_asm(wd, config, k)?;
            checkpoints.insert("asm".into(), wd.relative(&wd.asm_checkpoint(config.pretrain.objective, k)));
            (offset_steps, offset_wall) = pretrain_offset(wd, config)?;
            Policy::spin(Arc::new(asm), config.head_init, seed)
        }
        Method::SpinDistill => {
            let teacher = teacher_config(config).run_label();
            let path = wd.student(&teacher, seed);
            if !path.exists() {
                return Err(Error::Config(format!("student {} not found; run distill first", path.display())));
            }
            let d = config.asm.d;
            let student = Student::from_store(n, d, s, &ParamStore::load(&path)?)?;
            checkpoints.insert("student".into(), wd.relative(&path));
            let rec: DistillRecord = serde_json::from_str(&fs::read_to_string(path.with_file_name("distill_log.json"))?)
                .map_err(|e| Error::Corruption(e.to_string()))?;
            (offset_steps, offset_wall) = pretrain_offset(wd, config)?;
            offset_steps += rec.steps;
            offset_wall += rec.wall_clock_s;
            Policy::distilled(Arc::new(student), m, seed)
        }
        Method::Factored => Policy::factored(n, m, s, config.baseline_hidden(), seed),
        Method::Autoregressive => {
            let order = config.slot_order.clone().unwrap_or_else(|| (0..n).collect());
            Policy::autoregressive(n, m, s, config.baseline_hidden(), order, seed)?
        }
        Method::E2e => Policy::e2e(config.asm_config(), seed)?,
    };
    Ok(Built {
        policy,
        checkpoints,
        offset_steps,
        offset_wall_clock_s: offset_wall,
    })
}

/// Seeds to run: the override if given, else the configured list.
pub fn seeds(config: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| config.seeds.clone(), |s| vec![s])
}

/// Trains the configured method for every seed; returns the run manifests.
pub fn cmd_train(wd: &Workdir, config: &ExperimentConfig, seed: Option<u64>, force: bool) -> Result<Vec<RunManifest>> {
    let (spec, data) = load_dataset(wd, config)?;
    let label = config.run_label();
    let mut out = Vec::new();
    for seed in seeds(config, seed) {
        let dir = wd.run_dir(&label, seed);
        let metrics_path = dir.join("metrics.jsonl");
        guard(&metrics_path, force)?;
        let Built {
            mut policy,
            checkpoints,
            offset_steps,
            offset_wall_clock_s,
        } = build_policy(wd, config, seed)?;
        let mut critic = Critic::new(config.algo.clone(), spec.n(), spec.m(), spec.state_dim(), seed)?;
        let train = TrainConfig {
            algo: config.algo.clone(),
            eval_interval: config.eval_interval,
            eval_episodes: config.eval_episodes,
            extra_eval_steps: vec![config.early_checkpoint()],
            seed,
        };
        ensure_parent(&metrics_path)?;
        let mut file = fs::File::create(&metrics_path)?;
        let run_id = format!("{label}/seed{seed}");
        let records = train_policy(&mut policy, &mut critic, &data, &spec, &train, &run_id, |r| {
            writeln!(file, "{}", serde_json::to_string(r).expect("record serializes"))?;
            Ok(())
        })?;
        let mut checkpoints = checkpoints;
        let policy_path = dir.join("policy.ckpt");
        policy.store.save(&policy_path)?;
        checkpoints.insert("policy".into(), wd.relative(&policy_path));
        if let Some(store) = policy.joint_store() {
            let p = dir.join("asm.ckpt");
            store.save(&p)?;
            checkpoints.insert("joint_asm".into(), wd.relative(&p));
        }
        let manifest = RunManifest {
            code_version: CODE_VERSION.into(),
            label: label.clone(),
            method: config.method,
            seed,
            config: config.clone(),
            env_hash: spec.hash(),
            dataset_hash: data.manifest.content_hash.clone(),
            checkpoints,
            offset_steps,
            offset_wall_clock_s,
            final_eval_mean: records.last().map_or(f64::NAN, |r| r.eval_mean),
        };
        write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        out.push(manifest);
    }
    Ok(out)
}

/// Reads a run's metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}

/// Distills the trained SPIN policy of each seed into a state-only student.
pub fn cmd_distill(wd: &Workdir, config: &ExperimentConfig, seed: Option<u64>, force: bool) -> Result<Vec<Vec<f64>>> {
    let (_, data) = load_dataset(wd, config)?;
    let teacher_cfg = teacher_config(config);
    let label = teacher_cfg.run_label();
    let asm = Arc::new(load_asm(wd, config, config.asm_epoch())?);
    let states: Vec<Vec<f64>> = data.transitions.iter().map(|t| t.s.clone()).collect();
    let mut curves = Vec::new();
    for seed in seeds(config, seed) {
        let out = wd.student(&label, seed);
        guard(&out, force)?;
        let policy_path = wd.run_dir(&label, seed).join("policy.ckpt");
        if !policy_path.exists() {
            return Err(Error::Config(format!("teacher policy {} not found; train spin first", policy_path.display())));
        }
        let store = ParamStore::load(&policy_path)?;
        let qid = store.find("queries").ok_or_else(|| Error::Incompatible("teacher policy has no queries".into()))?;
        let teacher = Teacher {
            asm: asm.clone(),
            queries: store.get(qid).clone(),
        };
        let mut student = Student::new(config.env.n, config.asm.d, config.env.state_dim, seed);
        let dc = config.distill_config(seed);
        let start = Instant::now();
        let curve = train_student(&mut student, &teacher, &states, &dc)?;
        let record = DistillRecord {
            teacher: label.clone(),
            steps: dc.epochs * states.len().div_ceil(dc.batch_size),
            wall_clock_s: start.elapsed().as_secs_f64(),
            curve: curve.clone(),
        };
        ensure_parent(&out)?;
        student.store.save(&out)?;
        write(&out.with_file_name("distill_log.json"), serde_json::to_string_pretty(&record).expect("log serializes"))?;
        curves.push(curve);
    }
    Ok(curves)
}

/// Which frozen representation a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTarget {
    /// Pre-training checkpoint at this epoch; epoch 0 is the untrained encoder.
    Asm(usize),
    /// Student distilled from the SPIN run of this seed.
    Student(u64),
}

/// One line of `probe/reports.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub objective: ObjectiveKind,
    pub kappa: f64,
    #[serde(flatten)]
    pub report: ProbeReport,
    pub dependency_ratio: f64,
    pub p_value: f64,
}

pub fn cmd_probe(wd: &Workdir, config: &ExperimentConfig, target: ProbeTarget) -> Result<ProbeRecord> {
    let (_, data) = load_dataset(wd, config)?;
    let (fit, held) = split_by_episode(&data, config.probe.fit_fraction, config.probe.seed)?;
    let (features, representation) = match target {
        ProbeTarget::Asm(0) => (Features::Frozen(Arc::new(load_asm(wd, config, 0)?)), Representation::Random),
        ProbeTarget::Asm(k) => (Features::Frozen(Arc::new(load_asm(wd, config, k)?)), Representation::Pretrained(k)),
        ProbeTarget::Student(seed) => {
            let path = wd.student(&teacher_config(config).run_label(), seed);
            if !path.exists() {
                return Err(Error::Config(format!("student {} not found; run distill first", path.display())));
            }
            let student = Student::from_store(config.env.n, config.asm.d, config.env.state_dim, &ParamStore::load(&path)?)?;
            (Features::Student(Arc::new(student)), Representation::Student)
        }
    };
    let probe = fit_probe(features, config.env.m, representation, &fit.transitions, &config.probe)?;
    let report = eval_probe(&probe, &held.transitions)?;
    let record = ProbeRecord {
        objective: config.pretrain.objective,
        kappa: config.env.kappa,
        dependency_ratio: report.dependency_ratio(),
        p_value: report.dependency_p_value(),
        report,
    };
    let path = wd.probe_reports();
    ensure_parent(&path)?;
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    Ok(record)
}

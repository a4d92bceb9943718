//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use spin_core::asm::ObjectiveKind;
use spin_core::envs::{parse_tier_mix, EnvParams};
use spin_core::policy::Method;
use spin_core::Result;

use crate::commands::{cmd_distill, cmd_gen_data, cmd_pretrain, cmd_probe, cmd_train, ProbeTarget};
use crate::config::ExperimentConfig;
use crate::layout::Workdir;
use crate::report::cmd_report;

#[derive(Debug, Parser)]
#[command(name = "spin-lab", version, about = "Structured policy initialization experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Directory all other paths are relative to.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single seed instead of the configured list (data seed for gen-data,
    /// pre-training seed for pretrain).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub method: Option<Method>,
    /// Pre-training epochs for pretrain; ASM checkpoint epoch otherwise.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset.
    GenData {
        /// Environment preset such as `cta-n8m5` or `cta-n8m10-k0.0`.
        #[arg(long)]
        env: Option<String>,
        /// Behavior tier mix such as `expert=0.5,medium=0.5`.
        #[arg(long)]
        mix: Option<String>,
        /// Number of transitions.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Pre-train the action structure model and write epoch checkpoints.
    Pretrain {
        #[arg(long)]
        objective: Option<ObjectiveKind>,
    },
    /// Train policies for every configured seed.
    Train,
    /// Fit a linear probe on a frozen representation.
    Probe {
        /// Probe the distilled student of `--seed` instead of an ASM checkpoint.
        #[arg(long)]
        student: bool,
    },
    /// Distill trained SPIN policies' features into state-only students.
    Distill,
    /// Aggregate finished runs into CSV reports.
    Report,
}

/// Resolves the config file and command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let c = &cli.common;
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::load(&c.workdir.join(p))?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = c.method {
        config.method = m;
    }
    match &cli.command {
        Command::GenData { env, mix, size } => {
            if let Some(env) = env {
                config.env = EnvParams::from_preset(env)?;
            }
            if let Some(mix) = mix {
                config.tier_mix = parse_tier_mix(mix)?;
            }
            if let Some(size) = size {
                config.dataset_size = *size;
            }
            if let Some(seed) = c.seed {
                config.data_seed = seed;
            }
        }
        Command::Pretrain { objective } => {
            if let Some(o) = objective {
                config.pretrain.objective = *o;
            }
            if let Some(k) = c.epochs {
                config.pretrain.epochs = k;
            }
            if let Some(seed) = c.seed {
                config.pretrain.seed = seed;
            }
        }
        _ => {
            if let Some(k) = c.epochs {
                config.asm_epoch = Some(k);
            }
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    let wd = Workdir::new(&cli.common.workdir);
    let (seed, force) = (cli.common.seed, cli.common.force);
    match &cli.command {
        Command::GenData { .. } => {
            let data = cmd_gen_data(&wd, &config, force)?;
            println!("wrote {} transitions to {}", data.len(), wd.dataset().display());
        }
        Command::Pretrain { .. } => {
            let rec = cmd_pretrain(&wd, &config, force)?;
            println!(
                "pre-trained {} for {} epochs; checkpoints at epochs {:?}",
                rec.objective.as_str(),
                rec.epochs,
                rec.marks
            );
        }
        Command::Train => {
            for run in cmd_train(&wd, &config, seed, force)? {
                println!("{} seed {}: final eval return {:.4}", run.label, run.seed, run.final_eval_mean);
            }
        }
        Command::Distill => {
            for curve in cmd_distill(&wd, &config, seed, force)? {
                println!("distilled student, final loss {:.6}", curve.last().copied().unwrap_or(f64::NAN));
            }
        }
        Command::Probe { student } => {
            let target = if *student {
                ProbeTarget::Student(seed.unwrap_or(config.seeds[0]))
            } else {
                ProbeTarget::Asm(config.asm_epoch())
            };
            let r = cmd_probe(&wd, &config, target)?;
            println!(
                "{}: per-slot {:.4}, exact-match {:.4}, independence {:.4}",
                r.report.representation, r.report.per_slot_accuracy, r.report.exact_match_accuracy, r.report.independence_product
            );
        }
        Command::Report => {
            let summary = cmd_report(&wd)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", summary.files.join(", "));
        }
    }
    Ok(())
}

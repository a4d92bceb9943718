//! File layout under a work directory.

use std::fs;
use std::path::{Path, PathBuf};

use spin_core::asm::ObjectiveKind;
use spin_core::{Error, Result};

#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/dataset.jsonl")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }

    pub fn asm_dir(&self, objective: ObjectiveKind) -> PathBuf {
        self.root.join("asm").join(objective.as_str())
    }

    pub fn asm_checkpoint(&self, objective: ObjectiveKind, epoch: usize) -> PathBuf {
        self.asm_dir(objective).join(format!("asm_ep{epoch}.ckpt"))
    }

    pub fn pretrain_log(&self, objective: ObjectiveKind) -> PathBuf {
        self.asm_dir(objective).join("pretrain_log.json")
    }

    pub fn pretrain_loss_csv(&self, objective: ObjectiveKind) -> PathBuf {
        self.asm_dir(objective).join("pretrain_loss.csv")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.runs().join(label).join(format!("seed{seed}"))
    }

    pub fn student(&self, label: &str, seed: u64) -> PathBuf {
        self.root.join("distill").join(label).join(format!("seed{seed}")).join("student.ckpt")
    }

    pub fn probe_reports(&self) -> PathBuf {
        self.root.join("probe/reports.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Makes a path relative to the work directory for manifests.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

/// Refuses to overwrite `path` unless `force` is set.
pub fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents)?;
    Ok(())
}

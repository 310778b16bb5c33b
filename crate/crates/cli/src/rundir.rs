//! Run directories: config snapshot, seed, input hash, status and artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use splatpose::pipeline::{OptimizerConfig, TrainingLog};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// Config snapshot, seed and a content hash of every input file.
    pub fn record_inputs(&self, cfg: &OptimizerConfig, tag: Option<&str>, inputs: &[PathBuf], base: &Path) -> Result<String> {
        let mut snapshot = String::new();
        if let Some(t) = tag {
            let _ = writeln!(snapshot, "# tag: {t}");
        }
        snapshot.push_str(&cfg.to_text());
        self.write("config.txt", snapshot)?;
        self.write("seed.txt", format!("{}\n", cfg.seed))?;
        let (manifest, digest) = hash_inputs(inputs, base, &cfg.to_text())?;
        self.write("inputs.sha256", manifest)?;
        self.write("input_hash.txt", format!("{digest}\n"))?;
        Ok(digest)
    }

    pub fn write_logs(&self, log: &TrainingLog) -> Result<()> {
        for (name, rows) in &log.sessions {
            self.write(&format!("logs/{name}.csv"), TrainingLog::session_csv(rows))?;
        }
        Ok(())
    }

    /// Machine-readable `key=value` status.
    pub fn write_status(&self, status: &Status) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "status={}", if status.error.is_some() { "failed" } else { "ok" });
        let _ = writeln!(s, "command={}", status.command);
        if let Some(t) = &status.tag {
            let _ = writeln!(s, "tag={t}");
        }
        let _ = writeln!(s, "completed={}", status.completed.join(","));
        if let Some((stage, msg)) = &status.error {
            let _ = writeln!(s, "failed_stage={stage}");
            let _ = writeln!(s, "error={}", msg.replace('\n', " "));
        }
        self.write("status.txt", s)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Status {
    pub command: String,
    pub tag: Option<String>,
    pub completed: Vec<String>,
    pub error: Option<(String, String)>,
}

/// Manifest of `sha256  relative-path` lines (plus the config) and its own digest.
pub fn hash_inputs(inputs: &[PathBuf], base: &Path, config: &str) -> Result<(String, String)> {
    let mut manifest = String::new();
    for p in inputs {
        let bytes = fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
        let rel = p.strip_prefix(base).unwrap_or(p);
        let _ = writeln!(manifest, "{}  {}", hex::encode(Sha256::digest(&bytes)), rel.display());
    }
    let _ = writeln!(manifest, "{}  <config>", hex::encode(Sha256::digest(config.as_bytes())));
    let digest = hex::encode(Sha256::digest(manifest.as_bytes()));
    Ok((manifest, digest))
}

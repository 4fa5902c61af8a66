//! Run manifests: enough to replay a run and check its outputs.

use std::path::{Path, PathBuf};

use anyhow::Context;
use lppls_core::dataset::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub workers: usize,
}

impl Host {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            workers: rayon::current_num_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub args: Vec<String>,
    /// Fully resolved configuration.
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    /// Output files relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub host: Host,
    pub started_at: String,
    pub finished_at: String,
}

/// Collects what a subcommand read and wrote.
pub struct Recorder {
    pub subcommand: String,
    pub config: Value,
    pub seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started_at: chrono::DateTime<chrono::Utc>,
}

impl Recorder {
    pub fn new(subcommand: &str, config: &impl Serialize, seed: Option<u64>) -> anyhow::Result<Self> {
        Ok(Self {
            subcommand: subcommand.into(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            started_at: chrono::Utc::now(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Hash every file in `out` (recursively, sorted) and write the manifest there.
    pub fn finish(self, out: &Path) -> anyhow::Result<RunManifest> {
        let mut files = Vec::new();
        collect(out, out, &mut files)?;
        files.sort();
        let outputs = files
            .iter()
            .map(|rel| {
                let mut d = FileDigest::of(&out.join(rel))?;
                d.path = rel.clone();
                Ok(d)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand,
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            inputs: self
                .inputs
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<anyhow::Result<_>>()?,
            outputs,
            host: Host::current(),
            started_at: self.started_at.to_rfc3339(),
            finished_at: chrono::Utc::now().to_rfc3339(),
        };
        std::fs::write(out.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_NAME) {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

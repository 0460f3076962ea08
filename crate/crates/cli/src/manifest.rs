//! Self-describing run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use egoprompt_core::container::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const LOG: &str = "train.log.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const FREEZE: &str = "freeze.json";
pub const RUN_KIND: &str = "egoprompt-run";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory.
    pub path: String,
    pub bytes: u64,
    pub crc32: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetRecord {
    /// Regenerable from `config.benchmark` and this seed.
    Generated { seed: u64, fingerprint: String },
    File { path: String, fingerprint: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub kind: String,
    pub build: String,
    pub created: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: DatasetRecord,
    pub outputs: Vec<OutputFile>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn build_id() -> String {
    format!("egoprompt-v{}", env!("CARGO_PKG_VERSION"))
}

pub fn hex(crc: u32) -> String {
    format!("{crc:08x}")
}

/// Writes `bytes` to `dir/name` atomically and returns its manifest entry.
pub fn write_output(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<OutputFile> {
    write_atomic(&dir.join(name), bytes)?;
    Ok(OutputFile {
        path: name.into(),
        bytes: bytes.len() as u64,
        crc32: hex(crc32fast::hash(bytes)),
    })
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        write_atomic(&dir.join(MANIFEST), &text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.kind != RUN_KIND {
            bail!("{} is not a run manifest (kind {:?})", path.display(), m.kind);
        }
        Ok(m)
    }

    /// Checks that every listed output exists with its recorded CRC.
    pub fn verify_outputs(&self, dir: &Path) -> anyhow::Result<()> {
        for o in &self.outputs {
            let path = dir.join(&o.path);
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let crc = hex(crc32fast::hash(&bytes));
            if crc != o.crc32 || bytes.len() as u64 != o.bytes {
                bail!("{} does not match the manifest (crc {crc}, recorded {})", path.display(), o.crc32);
            }
        }
        Ok(())
    }

    pub fn output(&self, name: &str) -> Option<&OutputFile> {
        self.outputs.iter().find(|o| o.path == name)
    }
}

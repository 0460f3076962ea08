//! Run configuration: documented defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use egoprompt_core::data::BenchmarkSpec;
use egoprompt_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

/// Everything a run needs. File schema:
/// `{"benchmark_seed": null, "train": {..}, "benchmark": {..}}`, every key
/// optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the generated benchmark; defaults to `train.seed`.
    pub benchmark_seed: Option<u64>,
    pub train: TrainConfig,
    pub benchmark: BenchmarkSpec,
}

impl RunConfig {
    pub fn benchmark_seed(&self) -> u64 {
        self.benchmark_seed.unwrap_or(self.train.seed)
    }

    /// Desk-scale schedule with the benchmark geometry matched to the
    /// encoder.
    pub fn desk_scale() -> Self {
        Self {
            train: TrainConfig::desk_scale(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.benchmark.validate()?;
        let e = &self.train.encoder;
        let b = &self.benchmark;
        if (e.frames, e.patches, e.dim) != (b.frames, b.patches, b.dim) {
            return Err(UsageError(format!(
                "config error at `benchmark`: frames/patches/dim {}/{}/{} differ from train.encoder {}/{}/{}",
                b.frames, b.patches, b.dim, e.frames, e.patches, e.dim
            ))
            .into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `text` over `base`. Errors name the offending key path.
pub fn parse_over(base: &RunConfig, text: &str) -> anyhow::Result<RunConfig> {
    let over: Value = serde_json::from_str(text).map_err(|e| UsageError(format!("config is not valid JSON: {e}")))?;
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, over);
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let key = e.path().to_string();
        UsageError(format!("config error at `{key}`: {}", e.into_inner())).into()
    })
}

/// Configuration flags shared by `train`, `ablate` and `sweep`.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the desk-scale schedule instead of the full-scale one.
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub benchmark_seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs_stage1: Option<usize>,
    #[arg(long)]
    pub epochs_stage2: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda_freq: Option<f64>,
    #[arg(long)]
    pub lambda_orth: Option<f64>,
    #[arg(long)]
    pub no_deep_prompting: bool,
    #[arg(long)]
    pub samples_per_split: Option<usize>,
}

impl ConfigArgs {
    /// Defaults, overridden by the file, overridden by flags; validated.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let base = if self.desk_scale {
            RunConfig::desk_scale()
        } else {
            RunConfig::default()
        };
        let mut cfg = match &self.config {
            Some(path) => parse_over(&base, &read_config(path)?)?,
            None => base,
        };
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.variant {
            t.variant = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.epochs_stage1 {
            t.epochs_stage1 = v;
        }
        if let Some(v) = self.epochs_stage2 {
            t.epochs_stage2 = v;
        }
        if let Some(v) = self.warmup_epochs {
            t.warmup_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.pool_size {
            t.pool_size = v;
        }
        if let Some(v) = self.k {
            t.k = v;
        }
        if let Some(v) = self.lambda_freq {
            t.loss.lambda_freq = v;
        }
        if let Some(v) = self.lambda_orth {
            t.loss.lambda_orth = v;
        }
        if self.no_deep_prompting {
            t.encoder.deep_prompting = false;
        }
        if let Some(v) = self.samples_per_split {
            cfg.benchmark.samples_per_split = v;
        }
        if self.benchmark_seed.is_some() {
            cfg.benchmark_seed = self.benchmark_seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_config(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())).into())
}

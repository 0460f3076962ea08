use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_benchmark, BenchmarkSpec, SyntheticBenchmark};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trainer::{TrainConfig, Variant};

use super::bench::{flatten_metrics, train_and_evaluate, Measurement};
use super::metrics::{iqr, median};

/// Settings that distinguish one cell of an ablation or sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: Variant,
    pub lambda_freq: f64,
    pub lambda_orth: f64,
    pub deep_prompting: bool,
    pub pool_size: usize,
    pub k: usize,
}

impl CellKey {
    pub fn of(cfg: &TrainConfig) -> Self {
        Self {
            variant: cfg.variant,
            lambda_freq: cfg.loss.lambda_freq,
            lambda_orth: cfg.loss.lambda_orth,
            deep_prompting: cfg.encoder.deep_prompting,
            pool_size: cfg.pool_size,
            k: cfg.k,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{} lf={} lo={} deep={} P={} k={}",
            self.variant, self.lambda_freq, self.lambda_orth, self.deep_prompting, self.pool_size, self.k
        )
    }
}

/// Measurements of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: CellKey,
    pub seed: u64,
    pub measurements: Vec<Measurement>,
}

/// Seed aggregate of one metric in one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: CellKey,
    pub component: String,
    pub split: String,
    pub metric: String,
    pub seeds: usize,
    pub values: Vec<f64>,
    pub median: f64,
    pub iqr: f64,
    /// `win`, `loss` or `tie` against the full method's median; absent for
    /// the full method itself or when it is not part of the grid.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vs_full: Option<String>,
}

/// Runs `cells x seeds`, where each seed draws its own benchmark from
/// `spec` and seeds training. Runs execute in parallel; the record order
/// is cell-major, then seed.
pub fn run_grid<T: Scalar>(spec: &BenchmarkSpec, cells: &[TrainConfig], seeds: &[u64]) -> Result<Vec<RunRecord>> {
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    for c in cells {
        c.validate()?;
    }
    let benches: BTreeMap<u64, SyntheticBenchmark> = seeds
        .par_iter()
        .map(|&s| make_benchmark(s, spec).map(|b| (s, b)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(ci, seed)| {
            let cfg = TrainConfig {
                seed,
                ..cells[ci].clone()
            };
            let r = train_and_evaluate::<T>(&cfg, &benches[&seed])?;
            Ok(RunRecord {
                cell: CellKey::of(&cells[ci]),
                seed,
                measurements: flatten_metrics(&r.metrics, r.pool.as_ref()),
            })
        })
        .collect()
}

/// Median and IQR over seeds for every (cell, metric), with win/loss
/// against the cell equal to `full` when present.
pub fn summarize(records: &[RunRecord], full: Option<&CellKey>) -> Vec<SummaryRow> {
    let mut order: Vec<CellKey> = Vec::new();
    for r in records {
        if !order.contains(&r.cell) {
            order.push(r.cell.clone());
        }
    }
    let mut rows = Vec::new();
    for cell in &order {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| &r.cell == cell).collect();
        let mut keys: Vec<(&str, &str, &str)> = Vec::new();
        for m in runs.iter().flat_map(|r| &r.measurements) {
            let key = (m.component.as_str(), m.split.as_str(), m.metric.as_str());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        for (component, split, metric) in keys {
            let values: Vec<f64> = runs
                .iter()
                .filter_map(|r| {
                    r.measurements
                        .iter()
                        .find(|m| m.component == component && m.split == split && m.metric == metric)
                        .map(|m| m.value)
                })
                .collect();
            rows.push(SummaryRow {
                cell: cell.clone(),
                component: component.into(),
                split: split.into(),
                metric: metric.into(),
                seeds: values.len(),
                median: median(&values),
                iqr: iqr(&values),
                values,
                vs_full: None,
            });
        }
    }
    if let Some(full) = full {
        let reference: Vec<(String, String, String, f64)> = rows
            .iter()
            .filter(|r| &r.cell == full)
            .map(|r| (r.component.clone(), r.split.clone(), r.metric.clone(), r.median))
            .collect();
        for row in rows.iter_mut().filter(|r| &r.cell != full) {
            if let Some((_, _, _, m)) = reference
                .iter()
                .find(|(c, s, k, _)| c == &row.component && s == &row.split && k == &row.metric)
            {
                row.vs_full = Some(
                    match row.median.partial_cmp(m) {
                        Some(std::cmp::Ordering::Greater) => "win",
                        Some(std::cmp::Ordering::Less) => "loss",
                        _ => "tie",
                    }
                    .into(),
                );
            }
        }
    }
    rows
}

/// Which axes the ablation grid spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Cross `lambda_freq` and `lambda_orth` over `{0, default}`.
    pub regularizer_axis: bool,
    /// Cross deep prompting on/off.
    pub deep_axis: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            regularizer_axis: true,
            deep_axis: true,
        }
    }
}

/// Cell configurations of the ablation grid, derived from `base`.
pub fn ablation_cells(base: &TrainConfig, ab: &AblationConfig) -> Vec<TrainConfig> {
    let lambdas: Vec<(f64, f64)> = if ab.regularizer_axis {
        let (f, o) = (base.loss.lambda_freq, base.loss.lambda_orth);
        vec![(f, o), (0.0, o), (f, 0.0), (0.0, 0.0)]
    } else {
        vec![(base.loss.lambda_freq, base.loss.lambda_orth)]
    };
    let deeps: Vec<bool> = if ab.deep_axis {
        vec![true, false]
    } else {
        vec![base.encoder.deep_prompting]
    };
    let mut out = Vec::new();
    for &variant in &ab.variants {
        for &(lf, lo) in &lambdas {
            for &deep in &deeps {
                let mut c = base.clone();
                c.variant = variant;
                c.loss.lambda_freq = lf;
                c.loss.lambda_orth = lo;
                c.encoder.deep_prompting = deep;
                out.push(c);
            }
        }
    }
    out
}

/// The full method: two-stage with the base regularizer weights and deep
/// prompting.
pub fn full_method(base: &TrainConfig) -> CellKey {
    let mut c = base.clone();
    c.variant = Variant::TwoStage;
    c.encoder.deep_prompting = true;
    CellKey::of(&c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

pub fn run_ablation<T: Scalar>(spec: &BenchmarkSpec, base: &TrainConfig, ab: &AblationConfig) -> Result<GridReport> {
    let cells = ablation_cells(base, ab);
    let records = run_grid::<T>(spec, &cells, &ab.seeds)?;
    let full = full_method(base);
    let has_full = records.iter().any(|r| r.cell == full);
    let summary = summarize(&records, has_full.then_some(&full));
    Ok(GridReport { records, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PoolSize,
    LambdaFreq,
    LambdaOrth,
    K,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PoolSize => "pool_size",
            SweepAxis::LambdaFreq => "lambda_freq",
            SweepAxis::LambdaOrth => "lambda_orth",
            SweepAxis::K => "k",
        }
    }

    /// `base` with the axis set to `value`, validated.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let key = format!("sweep.{}", self.name());
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::Config {
                    key: key.clone(),
                    reason: format!("{v} is not a positive integer"),
                })
            }
        };
        let mut c = base.clone();
        c.variant = Variant::TwoStage;
        match self {
            SweepAxis::PoolSize => {
                c.pool_size = as_count(value)?;
                c.k = c.k.min(c.pool_size);
            }
            SweepAxis::K => c.k = as_count(value)?,
            SweepAxis::LambdaFreq => c.loss.lambda_freq = value,
            SweepAxis::LambdaOrth => c.loss.lambda_orth = value,
        }
        c.validate().map_err(|e| match e {
            Error::Config { reason, .. } => Error::Config { key, reason },
            other => other,
        })?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool_size" | "pool-size" => Ok(SweepAxis::PoolSize),
            "lambda_freq" | "lambda-freq" => Ok(SweepAxis::LambdaFreq),
            "lambda_orth" | "lambda-orth" => Ok(SweepAxis::LambdaOrth),
            "k" => Ok(SweepAxis::K),
            _ => Err(Error::Config {
                key: "sweep.axis".into(),
                reason: format!("unknown axis {s:?}; expected pool_size, lambda_freq, lambda_orth or k"),
            }),
        }
    }
}

/// One two-stage run per value and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Value-major, then seed.
    pub points: Vec<(f64, RunRecord)>,
}

pub fn run_sweep<T: Scalar>(
    spec: &BenchmarkSpec,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config {
            key: "sweep.values".into(),
            reason: "at least one value is required".into(),
        });
    }
    let cells = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let records = run_grid::<T>(spec, &cells, seeds)?;
    let points = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| (values[i / seeds.len()], r))
        .collect();
    Ok(SweepReport {
        axis,
        values: values.to_vec(),
        points,
    })
}

impl SweepReport {
    /// Seed medians of one metric per swept value.
    pub fn series(&self, component: &str, split: &str, metric: &str) -> Vec<(f64, f64)> {
        self.values
            .iter()
            .map(|&v| {
                let xs: Vec<f64> = self
                    .points
                    .iter()
                    .filter(|(pv, _)| *pv == v)
                    .filter_map(|(_, r)| {
                        r.measurements
                            .iter()
                            .find(|m| m.component == component && m.split == split && m.metric == metric)
                            .map(|m| m.value)
                    })
                    .collect();
                (v, median(&xs))
            })
            .collect()
    }
}

use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::data::{Split, SyntheticBenchmark};
use crate::error::Result;
use crate::model::ModelState;
use crate::pool::entropy_of_counts;
use crate::scalar::Scalar;
use crate::trainer::{Checkpoint, TrainConfig, Trainer, Variant};

use super::{evaluate_model, EvalMode, MetricsReport};

/// Pool usage after training, measured by retrieving for every clip of a
/// split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolDiagnostics {
    /// Selection counts, verb then noun.
    pub counts: [Vec<u64>; 2],
    /// Entropy (nats) of each component's selection histogram.
    pub entropy: [f64; 2],
    pub mean_abs_cos: f64,
}

impl PoolDiagnostics {
    pub fn mean_entropy(&self) -> f64 {
        0.5 * (self.entropy[0] + self.entropy[1])
    }
}

pub fn pool_diagnostics<T: Scalar>(
    model: &ModelState<T>,
    cfg: &TrainConfig,
    bench: &SyntheticBenchmark,
    split: Split,
) -> Result<PoolDiagnostics> {
    let data = bench.split(split);
    let clips: Vec<&[f32]> = (0..data.len()).map(|i| data.clip(i)).collect();
    let feats = model.batch_component_features(&clips)?;
    let p = model.pool.size();
    let mut counts = [vec![0u64; p], vec![0u64; p]];
    for f in &feats {
        for c in Component::ALL {
            let r = model.pool.retrieve(c, &f[c.index()], cfg.k, cfg.tau_pool)?;
            for i in r.indices {
                counts[c.index()][i] += 1;
            }
        }
    }
    let entropy = [entropy_of_counts(&counts[0])?, entropy_of_counts(&counts[1])?];
    Ok(PoolDiagnostics {
        counts,
        entropy,
        mean_abs_cos: model.pool.mean_abs_cos(),
    })
}

/// Outcome of one training run plus its evaluation.
#[derive(Clone, Debug)]
pub struct RunResult<T> {
    pub trainer: Trainer<T>,
    pub checkpoints: Vec<Checkpoint<T>>,
    pub metrics: MetricsReport,
    /// Present when the variant trains a pool.
    pub pool: Option<PoolDiagnostics>,
}

/// Evaluation mode matching how `variant` classifies.
pub fn mode_for(variant: Variant) -> EvalMode {
    if variant.uses_pool() {
        EvalMode::Stage2
    } else {
        EvalMode::Stage1
    }
}

/// Trains `cfg` on the benchmark's training split and evaluates it.
pub fn train_and_evaluate<T: Scalar>(cfg: &TrainConfig, bench: &SyntheticBenchmark) -> Result<RunResult<T>> {
    let mut trainer = Trainer::<T>::new(cfg.clone(), bench)?;
    let checkpoints = trainer.run_variant(bench.split(Split::Train))?;
    let mode = mode_for(cfg.variant);
    let metrics = evaluate_model(&trainer.model, &trainer.labels, cfg, bench, mode)?;
    let pool = if cfg.variant.uses_pool() {
        Some(pool_diagnostics(&trainer.model, cfg, bench, Split::Train)?)
    } else {
        None
    };
    Ok(RunResult {
        trainer,
        checkpoints,
        metrics,
        pool,
    })
}

/// One flattened measurement of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// `verb`, `noun`, or `pool` for pool-wide diagnostics.
    pub component: String,
    /// Split name, `hm:<protocol>`, or `train` for pool diagnostics.
    pub split: String,
    pub metric: String,
    pub value: f64,
}

fn measurement(component: &str, split: &str, metric: &str, value: f64) -> Measurement {
    Measurement {
        component: component.into(),
        split: split.into(),
        metric: metric.into(),
        value,
    }
}

/// Every metric of a report, in a fixed order.
pub fn flatten_metrics(m: &MetricsReport, pool: Option<&PoolDiagnostics>) -> Vec<Measurement> {
    let mut out = Vec::new();
    for s in &m.splits {
        let c = s.component.name();
        out.push(measurement(c, s.split.name(), "average_accuracy", s.average_accuracy));
        out.push(measurement(c, s.split.name(), "class_average_accuracy", s.class_average_accuracy));
    }
    for h in &m.hm {
        let split = format!("hm:{}", h.protocol.name());
        let c = h.component.name();
        out.push(measurement(c, &split, "average_accuracy", h.average_accuracy));
        out.push(measurement(c, &split, "class_average_accuracy", h.class_average_accuracy));
    }
    if let Some(p) = pool {
        for c in Component::ALL {
            out.push(measurement(c.name(), "train", "selection_entropy", p.entropy[c.index()]));
        }
        out.push(measurement("pool", "train", "mean_abs_cos", p.mean_abs_cos));
    }
    out
}

//! Metrics, model evaluation over the benchmark protocols, and the
//! ablation and sweep runners.

mod bench;
mod grid;
mod report;
mod metrics;

pub use bench::*;
pub use grid::*;
pub use report::*;
pub use metrics::{
    argmax, average_accuracy, class_average_accuracy, harmonic_mean, harmonic_mean_or_zero, iqr, median, quantile,
};

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::data::{Dataset, Split, SyntheticBenchmark};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::trainer::{Checkpoint, LabelSpace, TrainConfig};

/// Which feature classifies a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Component feature `f_c` against `W^c`.
    Stage1,
    /// Fused feature `f_s` against `W^c`.
    Stage2,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Stage1 => "stage1",
            EvalMode::Stage2 => "stage2",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(EvalMode::Stage1),
            "stage2" => Ok(EvalMode::Stage2),
            _ => Err(Error::Usage(format!("unknown mode {s:?}; expected stage1 or stage2"))),
        }
    }
}

/// Accuracy of one component on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub component: Component,
    pub samples: usize,
    pub average_accuracy: f64,
    pub class_average_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Within-domain vs cross-domain test.
    WithinCross,
    /// Base-label vs novel-label test.
    BaseNovel,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::WithinCross => "within-cross",
            Protocol::BaseNovel => "base-novel",
        }
    }

    pub fn splits(self) -> (Split, Split) {
        match self {
            Protocol::WithinCross => (Split::WithinTest, Split::CrossTest),
            Protocol::BaseNovel => (Split::BaseTest, Split::NovelTest),
        }
    }
}

/// Harmonic means of one protocol, from each metric family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicEntry {
    pub protocol: Protocol,
    pub component: Component,
    pub average_accuracy: f64,
    pub class_average_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub splits: Vec<SplitMetrics>,
    pub hm: Vec<HarmonicEntry>,
}

impl MetricsReport {
    pub fn get(&self, split: Split, c: Component) -> Option<&SplitMetrics> {
        self.splits.iter().find(|m| m.split == split && m.component == c)
    }

    pub fn hm(&self, protocol: Protocol, c: Component) -> Option<&HarmonicEntry> {
        self.hm.iter().find(|h| h.protocol == protocol && h.component == c)
    }
}

/// Scores clips against class tables and returns the argmax class per
/// component.
#[derive(Clone, Debug)]
pub struct Scorer<'a, T> {
    pub model: &'a ModelState<T>,
    pub mode: EvalMode,
    pub k: usize,
    pub tau_pool: f64,
}

fn cosine_scores<T: Scalar>(f: &[T], table: &Tensor<T>) -> Vec<f64> {
    let fv: Vec<f64> = f.iter().map(|x| x.widen()).collect();
    let fnorm = fv.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..table.rows())
        .map(|r| {
            let row = table.row(r);
            let dot: f64 = row.iter().zip(&fv).map(|(a, b)| a.widen() * b).sum();
            let rn = row.iter().map(|a| a.widen().powi(2)).sum::<f64>().sqrt();
            if fnorm > 0.0 && rn > 0.0 {
                dot / (fnorm * rn)
            } else {
                0.0
            }
        })
        .collect()
}

impl<T: Scalar> Scorer<'_, T> {
    /// Classification feature per component for each clip.
    pub fn features(&self, clips: &[&[f32]]) -> Result<Vec<[Vec<T>; 2]>> {
        let comp = self.model.batch_component_features(clips)?;
        match self.mode {
            EvalMode::Stage1 => Ok(comp),
            EvalMode::Stage2 => comp
                .par_iter()
                .map(|f| {
                    let fs = self.model.fused_feature(f, self.k, self.tau_pool)?;
                    Ok([fs.clone(), fs])
                })
                .collect(),
        }
    }

    /// Cosine scores of a feature against every row of `table`.
    pub fn scores(f: &[T], table: &Tensor<T>) -> Vec<f64> {
        cosine_scores(f, table)
    }
}

/// Evaluates a checkpoint; `Stage2` needs a checkpoint with a trained pool.
pub fn evaluate_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    bench: &SyntheticBenchmark,
    mode: EvalMode,
) -> Result<MetricsReport> {
    if mode == EvalMode::Stage2 && ckpt.header.stage < 2 {
        return Err(Error::Usage(format!(
            "stage2 evaluation needs a stage-2 checkpoint, got stage {}",
            ckpt.header.stage
        )));
    }
    evaluate_model(&ckpt.model, &ckpt.header.labels, &ckpt.header.config, bench, mode)
}

fn labels_match(labels: &LabelSpace, bench: &SyntheticBenchmark) -> bool {
    labels.verb_names == bench.verb_names
        && labels.noun_names == bench.noun_names
        && labels.novel_verbs == bench.novel_verbs
        && labels.novel_nouns == bench.novel_nouns
}

/// Scores every test split under `mode`.
///
/// Within-, cross- and base-test clips are classified among the base
/// labels. Novel-test clips are scored per component on the samples whose
/// label of that component is novel, among the novel labels only, with
/// class tables built zero-shot from the templates.
pub fn evaluate_model<T: Scalar>(
    model: &ModelState<T>,
    labels: &LabelSpace,
    cfg: &TrainConfig,
    bench: &SyntheticBenchmark,
    mode: EvalMode,
) -> Result<MetricsReport> {
    if !labels_match(labels, bench) {
        return Err(Error::Usage("benchmark label space differs from the model's".into()));
    }
    let scorer = Scorer {
        model,
        mode,
        k: cfg.k,
        tau_pool: cfg.tau_pool,
    };
    let templates = cfg.templates();
    let mut tables = Vec::with_capacity(2);
    for c in Component::ALL {
        let base = model.class_table(c, &labels.names_of(c, labels.base(c)), templates[c.index()])?;
        let novel = if labels.novel(c).is_empty() {
            None
        } else {
            Some(model.class_table(c, &labels.names_of(c, labels.novel(c)), templates[c.index()])?)
        };
        tables.push((base, novel));
    }
    let mut splits = Vec::new();
    for split in [Split::WithinTest, Split::CrossTest, Split::BaseTest, Split::NovelTest] {
        let data = bench.split(split);
        if data.is_empty() {
            continue;
        }
        let clips: Vec<&[f32]> = (0..data.len()).map(|i| data.clip(i)).collect();
        let feats = scorer.features(&clips)?;
        for c in Component::ALL {
            let (candidates, table) = if split == Split::NovelTest {
                match &tables[c.index()].1 {
                    Some(t) => (labels.novel(c), t),
                    None => continue,
                }
            } else {
                (labels.base(c), &tables[c.index()].0)
            };
            if let Some(m) = score_split(split, c, data, &feats, candidates, table)? {
                splits.push(m);
            }
        }
    }
    let mut hm = Vec::new();
    for protocol in [Protocol::WithinCross, Protocol::BaseNovel] {
        let (a, b) = protocol.splits();
        for c in Component::ALL {
            let (Some(x), Some(y)) = (
                splits.iter().find(|m| m.split == a && m.component == c),
                splits.iter().find(|m| m.split == b && m.component == c),
            ) else {
                continue;
            };
            hm.push(HarmonicEntry {
                protocol,
                component: c,
                average_accuracy: harmonic_mean_or_zero(x.average_accuracy, y.average_accuracy),
                class_average_accuracy: harmonic_mean_or_zero(x.class_average_accuracy, y.class_average_accuracy),
            });
        }
    }
    Ok(MetricsReport { mode, splits, hm })
}

fn score_split<T: Scalar>(
    split: Split,
    c: Component,
    data: &Dataset,
    feats: &[[Vec<T>; 2]],
    candidates: &[usize],
    table: &Tensor<T>,
) -> Result<Option<SplitMetrics>> {
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for (i, &y) in data.labels(c).iter().enumerate() {
        let Some(pos) = candidates.iter().position(|&l| l == y) else {
            continue;
        };
        let scores = cosine_scores(&feats[i][c.index()], table);
        preds.push(argmax(&scores));
        truth.push(pos);
    }
    if truth.is_empty() {
        return Ok(None);
    }
    Ok(Some(SplitMetrics {
        split,
        component: c,
        samples: truth.len(),
        average_accuracy: average_accuracy(&preds, &truth)?,
        class_average_accuracy: class_average_accuracy(&preds, &truth)?,
    }))
}

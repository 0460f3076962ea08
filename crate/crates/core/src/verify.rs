//! Gradient verification grid: every differentiable tape operation on
//! random instances, plus the full stage-1 and stage-2 objectives of a tiny
//! model, each against `f64` central differences.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::component::Component;
use crate::encoders::{ClassTokens, EncoderConfig};
use crate::error::Result;
use crate::model::{ModelState, ParamGroup, PromptInit};
use crate::numerics::{grad_check, GradCheckOptions, Objective, Tape, Tensor, Var};
use crate::objectives::{stage1_loss, unified_loss, ComponentBatch, UnifiedBatch};
use crate::pool::{fuse_patterns, project_fusion, retrieve_with_indices, select_topk, soft_frequency, PoolVars};
use crate::scalar::Scalar;
use crate::trainer::{component_pass, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Abs,
    Gelu,
    Sum,
    Mean,
    MeanRows,
    SoftmaxRows,
    LogSoftmaxRows,
    SoftmaxTemp,
    L2NormalizeRows,
    LayerNorm,
    Reshape,
    GatherRows,
    ConcatRows,
    SliceCols,
    ConcatCols,
    ScatterAdd,
    Dot,
    CosineSimilarity,
    CosineAgainstRows,
}

impl Op {
    pub const ALL: [Op; 26] = [
        Op::Matmul,
        Op::Transpose,
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::AddRow,
        Op::Scale,
        Op::Abs,
        Op::Gelu,
        Op::Sum,
        Op::Mean,
        Op::MeanRows,
        Op::SoftmaxRows,
        Op::LogSoftmaxRows,
        Op::SoftmaxTemp,
        Op::L2NormalizeRows,
        Op::LayerNorm,
        Op::Reshape,
        Op::GatherRows,
        Op::ConcatRows,
        Op::SliceCols,
        Op::ConcatCols,
        Op::ScatterAdd,
        Op::Dot,
        Op::CosineSimilarity,
        Op::CosineAgainstRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Scale => "scale",
            Op::Abs => "abs",
            Op::Gelu => "gelu",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows => "mean_rows",
            Op::SoftmaxRows => "softmax_rows",
            Op::LogSoftmaxRows => "log_softmax_rows",
            Op::SoftmaxTemp => "softmax_temp",
            Op::L2NormalizeRows => "l2_normalize_rows",
            Op::LayerNorm => "layer_norm",
            Op::Reshape => "reshape",
            Op::GatherRows => "gather_rows",
            Op::ConcatRows => "concat_rows",
            Op::SliceCols => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::ScatterAdd => "scatter_add",
            Op::Dot => "dot",
            Op::CosineSimilarity => "cosine_similarity",
            Op::CosineAgainstRows => "cosine_against_rows",
        }
    }
}

/// One random instance of an operation. The scalar objective is the
/// operation's output contracted with fixed random weights, so every
/// output entry contributes to the gradient.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub op: Op,
    pub leaves: Vec<Tensor<f64>>,
    idx: Vec<usize>,
    /// Column split point, row count or scatter length depending on `op`.
    n: usize,
    weights: Tensor<f64>,
}

const TAU: f64 = 0.5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape and data agree")
}

fn min_row_std(x: &Tensor<f64>) -> f64 {
    let cols = x.shape()[1];
    x.data()
        .chunks(cols)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

impl OpCase {
    pub fn random(op: Op, rng: &mut ChaCha8Rng) -> Result<Self> {
        let m = rng.gen_range(2..=4);
        let n = rng.gen_range(2..=4);
        let k = rng.gen_range(2..=4);
        let mut idx = Vec::new();
        let mut extra = 0;
        let leaves = match op {
            Op::Matmul => vec![uniform(rng, &[m, k]), uniform(rng, &[k, n])],
            Op::Add | Op::Sub | Op::Mul => vec![uniform(rng, &[m, n]), uniform(rng, &[m, n])],
            Op::AddRow => vec![uniform(rng, &[m, n]), uniform(rng, &[n])],
            Op::Abs => {
                // keep entries clear of the kink at zero
                let mut t = uniform(rng, &[m, n]);
                for x in t.data_mut() {
                    if x.abs() < 0.05 {
                        *x += 0.1f64.copysign(*x);
                    }
                }
                vec![t]
            }
            Op::LayerNorm => {
                // rows with a spread comparable to the probe step make the
                // central difference itself inaccurate
                let mut x = uniform(rng, &[m, n]);
                while min_row_std(&x) < 0.1 {
                    x = uniform(rng, &[m, n]);
                }
                vec![x, uniform(rng, &[n]), uniform(rng, &[n])]
            }
            Op::GatherRows => {
                idx = (0..k).map(|_| rng.gen_range(0..m)).collect();
                vec![uniform(rng, &[m, n])]
            }
            Op::ConcatRows => vec![uniform(rng, &[m, n]), uniform(rng, &[k, n])],
            Op::ConcatCols => vec![uniform(rng, &[m, n]), uniform(rng, &[m, k])],
            Op::SliceCols => {
                extra = rng.gen_range(0..n);
                idx = vec![rng.gen_range(1..=n - extra)];
                vec![uniform(rng, &[m, n])]
            }
            Op::ScatterAdd => {
                extra = m + 1;
                idx = (0..k).map(|_| rng.gen_range(0..extra)).collect();
                vec![uniform(rng, &[k])]
            }
            Op::SoftmaxTemp => vec![uniform(rng, &[n])],
            Op::Dot | Op::CosineSimilarity => vec![uniform(rng, &[n]), uniform(rng, &[n])],
            Op::CosineAgainstRows => vec![uniform(rng, &[n]), uniform(rng, &[m, n])],
            _ => vec![uniform(rng, &[m, n])],
        };
        let mut case = Self {
            op,
            leaves,
            idx,
            n: extra,
            weights: Tensor::scalar(1.0),
        };
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = case.leaves.iter().map(|l| tape.constant(l.clone())).collect();
        let out = case.apply(&mut tape, &vars)?;
        case.weights = uniform(rng, tape.shape(out));
        Ok(case)
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, l: &[Var]) -> Result<Var> {
        Ok(match self.op {
            Op::Matmul => tape.matmul(l[0], l[1])?,
            Op::Transpose => tape.transpose(l[0])?,
            Op::Add => tape.add(l[0], l[1])?,
            Op::Sub => tape.sub(l[0], l[1])?,
            Op::Mul => tape.mul(l[0], l[1])?,
            Op::AddRow => tape.add_row(l[0], l[1])?,
            Op::Scale => tape.scale(l[0], T::of(0.7)),
            Op::Abs => tape.abs(l[0]),
            Op::Gelu => tape.gelu(l[0]),
            Op::Sum => tape.sum(l[0]),
            Op::Mean => tape.mean(l[0]),
            Op::MeanRows => tape.mean_rows(l[0])?,
            Op::SoftmaxRows => tape.softmax_rows(l[0], T::of(TAU))?,
            Op::LogSoftmaxRows => tape.log_softmax_rows(l[0], T::of(TAU))?,
            Op::SoftmaxTemp => tape.softmax_temp(l[0], T::of(TAU))?,
            Op::L2NormalizeRows => tape.l2_normalize_rows(l[0])?,
            Op::LayerNorm => tape.layer_norm(l[0], l[1], l[2])?,
            Op::Reshape => {
                let len = tape.value(l[0]).len();
                tape.reshape(l[0], vec![len])?
            }
            Op::GatherRows => tape.gather_rows(l[0], &self.idx)?,
            Op::ConcatRows => tape.concat_rows(&[l[0], l[1]])?,
            Op::SliceCols => tape.slice_cols(l[0], self.n, self.idx[0])?,
            Op::ConcatCols => tape.concat_cols(&[l[0], l[1]])?,
            Op::ScatterAdd => tape.scatter_add(l[0], &self.idx, self.n)?,
            Op::Dot => tape.dot(l[0], l[1])?,
            Op::CosineSimilarity => tape.cosine_similarity(l[0], l[1])?,
            Op::CosineAgainstRows => tape.cosine_against_rows(l[0], l[1])?,
        })
    }
}

impl Objective for OpCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let out = self.apply(tape, leaves)?;
        let w = tape.constant(self.weights.cast());
        let p = tape.mul(out, w)?;
        Ok(tape.sum(p))
    }
}

/// Outcome of one named check over one or more instances.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub tol: f64,
    pub step: f64,
    pub rows: Vec<CheckRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>9} {:>8} {:>13} {:>8}  result\n",
            "check", "instances", "failures", "max_rel_err", "seconds"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>9} {:>8} {:>13.3e} {:>8.2}  {}",
                r.name,
                r.instances,
                r.failures,
                r.max_rel_error,
                r.seconds,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "overall: {} (h = {}, tol = {})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.step,
            self.tol
        );
        s
    }
}

/// Checks `op` on `instances` random instances.
pub fn check_op(op: Op, instances: usize, seed: u64, opts: GradCheckOptions) -> Result<CheckRow> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (op as u64) << 32);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let case = OpCase::random(op, &mut rng)?;
        let report = grad_check::<f64, _>(&case, &case.leaves, opts)?;
        worst = worst.max(report.max_rel_error());
        failures += usize::from(!report.passed());
    }
    Ok(CheckRow {
        name: op.name().into(),
        instances,
        failures,
        max_rel_error: worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Tiny model geometry for the objective checks: depth 2, width 8, pool
/// of 4 with top-2 retrieval, two clips per batch.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        pool_size: 4,
        k: 2,
        batch_size: 2,
        prompt_init: PromptInit::Gaussian,
        ..TrainConfig::default()
    };
    cfg.encoder = EncoderConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        text_prompt_len: 2,
        video_prompt_len: 2,
        frames: 2,
        patches: 2,
        mlp_ratio: 2,
        deep_prompting: true,
    };
    cfg
}

const TINY_VERBS: [&str; 3] = ["take", "put", "open"];
const TINY_NOUNS: [&str; 3] = ["cup", "knife", "door"];

struct TinyInstance {
    cfg: TrainConfig,
    model: ModelState<f64>,
    clips: Vec<Vec<f32>>,
    labels: [Vec<usize>; 2],
}

impl TinyInstance {
    fn new(seed: u64) -> Result<Self> {
        let cfg = tiny_config();
        let model = ModelState::init(seed, &cfg.encoder, cfg.pool_size, cfg.prompt_init, cfg.templates())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
        let n = cfg.encoder.clip_tokens() * cfg.encoder.dim;
        let clips = (0..cfg.batch_size)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let labels = [0, 1].map(|_| (0..cfg.batch_size).map(|_| rng.gen_range(0..3)).collect());
        Ok(Self {
            cfg,
            model,
            clips,
            labels,
        })
    }

    fn names(c: Component) -> Vec<String> {
        let src: &[&str] = match c {
            Component::Verb => &TINY_VERBS,
            Component::Noun => &TINY_NOUNS,
        };
        src.iter().map(|s| s.to_string()).collect()
    }

    fn tokens<T: Scalar>(&self, model: &ModelState<T>) -> Result<[ClassTokens<T>; 2]> {
        let t = self.cfg.templates();
        Ok([
            ClassTokens::new(&model.encoders.vocab, Component::Verb, &Self::names(Component::Verb), t[0])?,
            ClassTokens::new(&model.encoders.vocab, Component::Noun, &Self::names(Component::Noun), t[1])?,
        ])
    }

    fn frozen<T: Scalar>(&self, model: &ModelState<T>) -> Result<[Tensor<T>; 2]> {
        let t = self.cfg.templates();
        Ok([
            model.handcrafted_table(Component::Verb, &Self::names(Component::Verb), t[0])?,
            model.handcrafted_table(Component::Noun, &Self::names(Component::Noun), t[1])?,
        ])
    }

    fn leaves(&self, groups: &[ParamGroup]) -> Vec<Tensor<f64>> {
        groups
            .iter()
            .flat_map(|&g| self.model.named_tensors(g).into_iter().map(|(_, t)| t.clone()))
            .collect()
    }
}

/// Stage-1 loss of the tiny model as a function of both prompt sets.
struct Stage1Objective(TinyInstance);

impl Objective for Stage1Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let inst = &self.0;
        let model = inst.model.cast::<T>();
        let mut bm = model.bind(tape, &[]);
        let nv = bm.group_vars(ParamGroup::VerbPrompts).len();
        bm.set_group_vars(ParamGroup::VerbPrompts, &leaves[..nv])?;
        bm.set_group_vars(ParamGroup::NounPrompts, &leaves[nv..])?;
        let clips: Vec<&[f32]> = inst.clips.iter().map(|c| c.as_slice()).collect();
        let tokens = inst.tokens(&model)?;
        let frozen = inst.frozen(&model)?;
        let (feats, tables, frozen) = component_pass(tape, &model, &bm, &clips, &tokens, &frozen)?;
        let verb = ComponentBatch {
            feats: feats[0],
            table: tables[0],
            frozen: frozen[0],
            labels: &inst.labels[0],
        };
        let noun = ComponentBatch {
            feats: feats[1],
            table: tables[1],
            frozen: frozen[1],
            labels: &inst.labels[1],
        };
        Ok(stage1_loss(tape, &verb, &noun, &inst.cfg.loss)?.total)
    }
}

/// Unified loss of the tiny model as a function of the pool and the
/// projector, from cached component features and tables. The top-k sets
/// are fixed at the probe point.
struct Stage2Objective {
    inst: TinyInstance,
    feats: Vec<[Vec<f64>; 2]>,
    tables: [Tensor<f64>; 2],
    indices: Vec<[Vec<usize>; 2]>,
}

impl Stage2Objective {
    fn new(inst: TinyInstance) -> Result<Self> {
        let clips: Vec<&[f32]> = inst.clips.iter().map(|c| c.as_slice()).collect();
        let feats = inst.model.batch_component_features(&clips)?;
        let t = inst.cfg.templates();
        let tables = [
            inst.model
                .class_table(Component::Verb, &TinyInstance::names(Component::Verb), t[0])?,
            inst.model
                .class_table(Component::Noun, &TinyInstance::names(Component::Noun), t[1])?,
        ];
        let mut indices = Vec::with_capacity(feats.len());
        for f in &feats {
            let mut tape = Tape::<f64>::new();
            let q = tape.constant(inst.model.pool.queries.clone());
            let mut pair: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for c in Component::ALL {
                let fv = tape.constant(Tensor::vector(f[c.index()].clone()));
                let cos = tape.cosine_against_rows(fv, q)?;
                pair[c.index()] = select_topk(tape.value(cos).data(), inst.cfg.k)?;
            }
            indices.push(pair);
        }
        Ok(Self {
            inst,
            feats,
            tables,
            indices,
        })
    }
}

impl Objective for Stage2Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let cfg = &self.inst.cfg;
        let pool = PoolVars {
            queries: leaves[0],
            values: leaves[1],
        };
        let proj = crate::pool::ProjectorVars {
            weight: leaves[2],
            bias: leaves[3],
        };
        let mut rows = Vec::new();
        let mut rets = [Vec::new(), Vec::new()];
        for (f, idx) in self.feats.iter().zip(&self.indices) {
            let mut fused = Vec::with_capacity(2);
            for c in Component::ALL {
                let v = Tensor::vector(f[c.index()].iter().map(|&x| T::of(x)).collect());
                let fv = tape.constant(v);
                let r = retrieve_with_indices(tape, c, fv, &pool, &idx[c.index()], cfg.tau_pool)?;
                fused.push(fuse_patterns(tape, &r, &pool)?);
                rets[c.index()].push(r);
            }
            let fs = project_fusion(tape, fused[0], fused[1], &proj)?;
            let d = tape.value(fs).len();
            rows.push(tape.reshape(fs, vec![1, d])?);
        }
        let fused = tape.concat_rows(&rows)?;
        let verb_table = tape.constant(self.tables[0].cast());
        let noun_table = tape.constant(self.tables[1].cast());
        let windows = [
            soft_frequency(tape, &rets[0], cfg.pool_size)?,
            soft_frequency(tape, &rets[1], cfg.pool_size)?,
        ];
        let ub = UnifiedBatch {
            fused,
            verb_table,
            noun_table,
            verb_labels: &self.inst.labels[0],
            noun_labels: &self.inst.labels[1],
            windows,
            pool,
        };
        Ok(unified_loss(tape, &ub, &cfg.loss, cfg.k_freq())?.total)
    }
}

fn objective_row(name: &str, start: Instant, report: &crate::numerics::GradCheckReport) -> CheckRow {
    CheckRow {
        name: name.into(),
        instances: 1,
        failures: usize::from(!report.passed()),
        max_rel_error: report.max_rel_error(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Full stage-1 objective with respect to every prompt tensor.
pub fn check_stage1(seed: u64, opts: GradCheckOptions) -> Result<CheckRow> {
    let start = Instant::now();
    let inst = TinyInstance::new(seed)?;
    let leaves = inst.leaves(&[ParamGroup::VerbPrompts, ParamGroup::NounPrompts]);
    let report = grad_check::<f64, _>(&Stage1Objective(inst), &leaves, opts)?;
    Ok(objective_row("stage1_objective", start, &report))
}

/// Full stage-2 objective with respect to the pool and the projector.
pub fn check_stage2(seed: u64, opts: GradCheckOptions) -> Result<CheckRow> {
    let start = Instant::now();
    let inst = TinyInstance::new(seed)?;
    let leaves = inst.leaves(&[ParamGroup::Pool, ParamGroup::Projector]);
    let report = grad_check::<f64, _>(&Stage2Objective::new(inst)?, &leaves, opts)?;
    Ok(objective_row("stage2_objective", start, &report))
}

/// Every operation on `instances` random instances, then both objectives.
pub fn run_verification(instances: usize, seed: u64, opts: GradCheckOptions) -> Result<VerifyReport> {
    let mut rows = Op::ALL
        .iter()
        .map(|&op| check_op(op, instances, seed, opts))
        .collect::<Result<Vec<_>>>()?;
    rows.push(check_stage1(seed, opts)?);
    rows.push(check_stage2(seed, opts)?);
    Ok(VerifyReport {
        tol: opts.tol,
        step: opts.step,
        rows,
    })
}

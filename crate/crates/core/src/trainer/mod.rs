//! Two-stage optimization: component prompt learning, then pool and
//! projector learning with the prompts frozen, plus the single-stage and
//! joint variants.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_KIND};
pub use config::{TrainConfig, Variant};
pub use optim::{adamw_step, lr_at_step, AdamW, OptimizerState};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::data::{sample_batches, Dataset, SyntheticBenchmark};
use crate::encoders::{encode_text_classes, encode_video, map_text_prompts_to_video, ClassTokens};
use crate::error::{Error, Result};
use crate::model::{clip_var, fuse_on_tape, fuse_vars, ModelState, ParamGroup};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::{stage1_loss, unified_loss, ComponentBatch, UnifiedBatch};
use crate::pool::{soft_frequency, RetrievalVars};
use crate::scalar::Scalar;

/// Label names and the base/novel partition a model was trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub verb_names: Vec<String>,
    pub noun_names: Vec<String>,
    pub base_verbs: Vec<usize>,
    pub base_nouns: Vec<usize>,
    pub novel_verbs: Vec<usize>,
    pub novel_nouns: Vec<usize>,
}

impl LabelSpace {
    pub fn from_benchmark(b: &SyntheticBenchmark) -> Self {
        Self {
            verb_names: b.verb_names.clone(),
            noun_names: b.noun_names.clone(),
            base_verbs: b.base(Component::Verb),
            base_nouns: b.base(Component::Noun),
            novel_verbs: b.novel_verbs.clone(),
            novel_nouns: b.novel_nouns.clone(),
        }
    }

    pub fn names(&self, c: Component) -> &[String] {
        match c {
            Component::Verb => &self.verb_names,
            Component::Noun => &self.noun_names,
        }
    }

    pub fn base(&self, c: Component) -> &[usize] {
        match c {
            Component::Verb => &self.base_verbs,
            Component::Noun => &self.base_nouns,
        }
    }

    pub fn novel(&self, c: Component) -> &[usize] {
        match c {
            Component::Verb => &self.novel_verbs,
            Component::Noun => &self.novel_nouns,
        }
    }

    pub fn names_of(&self, c: Component, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.names(c)[i].clone()).collect()
    }

    /// Position of each label within `ids`.
    pub fn positions(&self, c: Component, ids: &[usize]) -> Vec<Option<usize>> {
        let mut pos = vec![None; self.names(c).len()];
        for (p, &i) in ids.iter().enumerate() {
            pos[i] = Some(p);
        }
        pos
    }
}

/// Optimization phase, as logged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Stage1,
    Stage2,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Joint => "joint",
        }
    }

    fn id(self) -> u8 {
        match self {
            Phase::Stage1 => 1,
            Phase::Stage2 => 2,
            Phase::Joint => 3,
        }
    }

    pub fn trainable(self) -> &'static [ParamGroup] {
        match self {
            Phase::Stage1 => &[ParamGroup::VerbPrompts, ParamGroup::NounPrompts],
            Phase::Stage2 => &[ParamGroup::Pool, ParamGroup::Projector],
            Phase::Joint => &[
                ParamGroup::VerbPrompts,
                ParamGroup::NounPrompts,
                ParamGroup::Pool,
                ParamGroup::Projector,
            ],
        }
    }

    fn uses_pool(self) -> bool {
        self != Phase::Stage1
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogEvent {
    Step {
        phase: Phase,
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        terms: BTreeMap<String, f64>,
    },
    Epoch {
        phase: Phase,
        epoch: usize,
        mean_loss: f64,
        /// Integer selection counters before the epoch reset, verb then noun.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        counters: Option<[Vec<u64>; 2]>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        selection_entropy: Option<[f64; 2]>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        pool_mean_abs_cos: Option<f64>,
    },
}

/// Gradient and checksum evidence for one parameter group over a phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub phase: Phase,
    pub group: ParamGroup,
    pub trainable: bool,
    /// Whether the group was placed on the tape during the phase's steps.
    pub on_tape: bool,
    /// Largest per-step L2 norm of the group's gradient.
    pub max_grad_norm: f64,
    pub checksum_before: u32,
    pub checksum_after: u32,
}

impl FreezeRecord {
    /// A frozen group must show exactly zero gradient and unchanged weights.
    pub fn holds(&self) -> bool {
        self.trainable || (self.max_grad_norm == 0.0 && self.checksum_before == self.checksum_after)
    }
}

/// Per-phase outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub epochs: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

struct StepOutput<T> {
    loss: f64,
    terms: Vec<(&'static str, f64)>,
    grads: Vec<Vec<T>>,
    frozen_norms: Vec<(ParamGroup, f64)>,
    selections: Vec<(Component, Vec<usize>, Vec<T>)>,
}

/// Training state of one run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub labels: LabelSpace,
    pub model: ModelState<T>,
    pub log: Vec<LogEvent>,
    pub freeze: Vec<FreezeRecord>,
    pub summaries: Vec<PhaseSummary>,
    pub epochs_done: usize,
    pub steps_done: usize,
    last_good: Option<ModelState<T>>,
}

fn l2(v: &[impl Scalar]) -> f64 {
    v.iter().map(|x| x.widen().powi(2)).sum::<f64>().sqrt()
}

fn epoch_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((phase.id() as u64) << 56) ^ epoch as u64
}

/// Remaps dataset labels to positions within the training label set.
fn remap(labels: &[usize], pos: &[Option<usize>], batch: &[usize]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|&i| {
            let y = labels[i];
            pos.get(y).copied().flatten().ok_or(Error::Label {
                label: y,
                classes: pos.iter().flatten().count(),
            })
        })
        .collect()
}

fn grads_and_freeze<T: Scalar>(
    tape: &Tape<T>,
    vars_of: impl Fn(ParamGroup) -> Option<Vec<Var>>,
    trainable: &[ParamGroup],
) -> (Vec<Vec<T>>, Vec<(ParamGroup, f64)>) {
    let mut grads = Vec::new();
    let mut frozen = Vec::new();
    for g in ParamGroup::ALL {
        let vars = vars_of(g);
        if trainable.contains(&g) {
            for v in vars.expect("trainable group is on the tape") {
                grads.push(tape.grad_or_zero(v));
            }
        } else {
            let norm = vars.map_or(0.0, |vs| {
                vs.iter()
                    .map(|&v| tape.grad(v).map_or(0.0, |g| l2(g).powi(2)))
                    .sum::<f64>()
                    .sqrt()
            });
            frozen.push((g, norm));
        }
    }
    (grads, frozen)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, bench: &SyntheticBenchmark) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let s = &bench.spec;
        if (e.frames, e.patches, e.dim) != (s.frames, s.patches, s.dim) {
            return Err(Error::dim(
                "benchmark geometry",
                &[s.frames, s.patches, s.dim],
                &[e.frames, e.patches, e.dim],
            ));
        }
        let model = ModelState::init(cfg.seed, &cfg.encoder, cfg.pool_size, cfg.prompt_init, cfg.templates())?;
        Ok(Self::from_parts(cfg, LabelSpace::from_benchmark(bench), model))
    }

    pub fn from_parts(cfg: TrainConfig, labels: LabelSpace, model: ModelState<T>) -> Self {
        Self {
            cfg,
            labels,
            model,
            log: Vec::new(),
            freeze: Vec::new(),
            summaries: Vec::new(),
            epochs_done: 0,
            steps_done: 0,
            last_good: None,
        }
    }

    /// Resumes from a checkpoint's model and labels.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Self {
        let mut t = Self::from_parts(ckpt.header.config, ckpt.header.labels, ckpt.model);
        t.epochs_done = ckpt.header.epochs_done;
        t.steps_done = ckpt.header.steps_done;
        t
    }

    pub fn checkpoint(&self, stage: u8) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                stage,
                variant: self.cfg.variant,
                config: self.cfg.clone(),
                labels: self.labels.clone(),
                epochs_done: self.epochs_done,
                steps_done: self.steps_done,
            },
            model: self.model.clone(),
        }
    }

    /// Model as of the last completed epoch (or the start of training).
    pub fn last_good(&self) -> &ModelState<T> {
        self.last_good.as_ref().unwrap_or(&self.model)
    }

    /// JSON lines of the log.
    pub fn log_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    fn base_names(&self, c: Component) -> Vec<String> {
        self.labels.names_of(c, self.labels.base(c))
    }

    fn class_tokens(&self, c: Component) -> Result<ClassTokens<T>> {
        ClassTokens::new(
            &self.model.encoders.vocab,
            c,
            &self.base_names(c),
            self.cfg.templates()[c.index()],
        )
    }

    /// Runs `epochs` epochs of `phase` over `n` samples.
    fn run_phase<F>(&mut self, phase: Phase, n: usize, epochs: usize, mut step_fn: F) -> Result<PhaseSummary>
    where
        F: FnMut(&ModelState<T>, &[usize]) -> Result<StepOutput<T>>,
    {
        let trainable = phase.trainable();
        let before: Vec<u32> = ParamGroup::ALL.iter().map(|&g| self.model.group_checksum(g)).collect();
        let mut max_norm = [0.0f64; 5];
        let mut summary = PhaseSummary {
            phase,
            epochs: 0,
            steps: 0,
            epoch_losses: Vec::new(),
        };
        if epochs > 0 && n == 0 {
            return Err(Error::Usage(format!("{phase}: empty training split")));
        }
        let sizes: Vec<usize> = self.model.groups_mut(trainable).iter().map(|t| t.len()).collect();
        let names: Vec<String> = ParamGroup::ALL
            .iter()
            .filter(|g| trainable.contains(g))
            .flat_map(|&g| self.model.named_tensors(g).into_iter().map(|(n, _)| n))
            .collect();
        let mut state = OptimizerState::new(&sizes);
        let opt = AdamW::from_config(&self.cfg);
        let batch_size = self.cfg.batch_size.min(n.max(1));
        let steps_per_epoch = n.div_ceil(batch_size);
        self.last_good = Some(self.model.clone());
        self.model.pool.reset_statistics();
        let mut step = 0usize;
        for epoch in 0..epochs {
            let batches = sample_batches(n, batch_size, epoch_seed(self.cfg.seed, phase, epoch))?;
            let mut loss_sum = 0.0;
            for batch in &batches {
                let lr = lr_at_step(step, steps_per_epoch, &self.cfg);
                let out = step_fn(&self.model, batch)?;
                if !out.loss.is_finite() || out.loss > self.cfg.divergence_threshold {
                    self.restore();
                    return Err(Error::Diverged {
                        stage: phase.id(),
                        step,
                        loss: out.loss,
                    });
                }
                for (g, norm) in &out.frozen_norms {
                    let gi = *g as usize;
                    max_norm[gi] = max_norm[gi].max(*norm);
                }
                for (c, idx, w) in &out.selections {
                    self.model.pool.record_selection(*c, idx, w);
                }
                let mut params = self.model.groups_mut(trainable);
                if let Err(e) = adamw_step(&mut params, &out.grads, &names, &mut state, lr, &opt) {
                    self.restore();
                    return Err(e);
                }
                loss_sum += out.loss;
                self.log.push(LogEvent::Step {
                    phase,
                    epoch,
                    step,
                    lr,
                    loss: out.loss,
                    terms: out.terms.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
                });
                step += 1;
            }
            let mean_loss = loss_sum / batches.len() as f64;
            let pool = &self.model.pool;
            let (counters, entropy, cos) = if phase.uses_pool() {
                let ent = [
                    pool.selection_entropy(Component::Verb).unwrap_or(0.0),
                    pool.selection_entropy(Component::Noun).unwrap_or(0.0),
                ];
                (Some(pool.counters.clone()), Some(ent), Some(pool.mean_abs_cos()))
            } else {
                (None, None, None)
            };
            self.log.push(LogEvent::Epoch {
                phase,
                epoch,
                mean_loss,
                counters,
                selection_entropy: entropy,
                pool_mean_abs_cos: cos,
            });
            self.model.pool.reset_statistics();
            summary.epoch_losses.push(mean_loss);
            summary.epochs += 1;
            self.epochs_done += 1;
            self.last_good = Some(self.model.clone());
        }
        summary.steps = step;
        self.steps_done += step;
        for (gi, &g) in ParamGroup::ALL.iter().enumerate() {
            // stage 2 works from cached features, so encoders and prompts
            // never enter its tapes
            let on_tape = trainable.contains(&g) || phase != Phase::Stage2;
            self.freeze.push(FreezeRecord {
                phase,
                group: g,
                trainable: trainable.contains(&g),
                on_tape: on_tape && epochs > 0,
                max_grad_norm: max_norm[gi],
                checksum_before: before[gi],
                checksum_after: self.model.group_checksum(g),
            });
        }
        self.summaries.push(summary.clone());
        Ok(summary)
    }

    fn restore(&mut self) {
        if let Some(m) = self.last_good.clone() {
            self.model = m;
        }
    }

    /// Component-specific prompt learning on `data`; only the verb and noun
    /// prompt sets change.
    pub fn train_stage1(&mut self, data: &Dataset) -> Result<PhaseSummary> {
        let cfg = self.cfg.clone();
        let tokens = [self.class_tokens(Component::Verb)?, self.class_tokens(Component::Noun)?];
        let frozen = [
            self.model
                .handcrafted_table(Component::Verb, &self.base_names(Component::Verb), &cfg.verb_template)?,
            self.model
                .handcrafted_table(Component::Noun, &self.base_names(Component::Noun), &cfg.noun_template)?,
        ];
        let pos = Component::ALL.map(|c| self.labels.positions(c, self.labels.base(c)));
        let trainable = Phase::Stage1.trainable();
        self.run_phase(Phase::Stage1, data.len(), cfg.epochs_stage1, |model, batch| {
            let mut tape = Tape::new();
            let bm = model.bind(&mut tape, trainable);
            let (feats, tables, frozen_vars) = {
                let clips: Vec<&[f32]> = batch.iter().map(|&i| data.clip(i)).collect();
                component_pass(&mut tape, model, &bm, &clips, &tokens, &frozen)?
            };
            let labels = [
                remap(&data.verbs, &pos[0], batch)?,
                remap(&data.nouns, &pos[1], batch)?,
            ];
            let verb = ComponentBatch {
                feats: feats[0],
                table: tables[0],
                frozen: frozen_vars[0],
                labels: &labels[0],
            };
            let noun = ComponentBatch {
                feats: feats[1],
                table: tables[1],
                frozen: frozen_vars[1],
                labels: &labels[1],
            };
            let terms = stage1_loss(&mut tape, &verb, &noun, &cfg.loss)?;
            let loss = tape.scalar_value(terms.total).widen();
            let logged = vec![
                ("ce_verb", tape.scalar_value(terms.ce[0]).widen()),
                ("ce_noun", tape.scalar_value(terms.ce[1]).widen()),
                ("kg_verb", tape.scalar_value(terms.kg[0]).widen()),
                ("kg_noun", tape.scalar_value(terms.kg[1]).widen()),
            ];
            tape.backward(terms.total)?;
            let (grads, frozen_norms) = grads_and_freeze(&tape, |g| Some(bm.group_vars(g)), trainable);
            Ok(StepOutput {
                loss,
                terms: logged,
                grads,
                frozen_norms,
                selections: Vec::new(),
            })
        })
    }

    /// Pool and projector learning on `data` with the component prompts
    /// frozen. Component features and class tables are computed once.
    pub fn train_stage2(&mut self, data: &Dataset) -> Result<PhaseSummary> {
        let cfg = self.cfg.clone();
        let clips: Vec<&[f32]> = (0..data.len()).map(|i| data.clip(i)).collect();
        let feats = self.model.batch_component_features(&clips)?;
        let tables = [
            self.model
                .class_table(Component::Verb, &self.base_names(Component::Verb), &cfg.verb_template)?,
            self.model
                .class_table(Component::Noun, &self.base_names(Component::Noun), &cfg.noun_template)?,
        ];
        let pos = Component::ALL.map(|c| self.labels.positions(c, self.labels.base(c)));
        let trainable = Phase::Stage2.trainable();
        self.run_phase(Phase::Stage2, data.len(), cfg.epochs_stage2, |model, batch| {
            let mut tape = Tape::new();
            let pool = model.pool.bind(&mut tape, true);
            let proj = model.projector.bind(&mut tape, true);
            let mut rows = Vec::with_capacity(batch.len());
            let mut rets: [Vec<RetrievalVars>; 2] = [Vec::new(), Vec::new()];
            for &i in batch {
                let (fs, r) = fuse_on_tape(&mut tape, &pool, &proj, &feats[i], cfg.k, cfg.tau_pool)?;
                let d = tape.value(fs).len();
                rows.push(tape.reshape(fs, vec![1, d])?);
                let [rv, rn] = r;
                rets[0].push(rv);
                rets[1].push(rn);
            }
            let fused = tape.concat_rows(&rows)?;
            let verb_table = tape.constant(tables[0].clone());
            let noun_table = tape.constant(tables[1].clone());
            let labels = [
                remap(&data.verbs, &pos[0], batch)?,
                remap(&data.nouns, &pos[1], batch)?,
            ];
            let windows = [
                soft_frequency(&mut tape, &rets[0], cfg.pool_size)?,
                soft_frequency(&mut tape, &rets[1], cfg.pool_size)?,
            ];
            let ub = UnifiedBatch {
                fused,
                verb_table,
                noun_table,
                verb_labels: &labels[0],
                noun_labels: &labels[1],
                windows,
                pool,
            };
            let terms = unified_loss(&mut tape, &ub, &cfg.loss, cfg.k_freq())?;
            let loss = tape.scalar_value(terms.total).widen();
            let logged = unified_terms_log(&tape, &terms);
            tape.backward(terms.total)?;
            let (grads, frozen_norms) = grads_and_freeze(
                &tape,
                |g| match g {
                    ParamGroup::Pool => Some(vec![pool.queries, pool.values]),
                    ParamGroup::Projector => Some(vec![proj.weight, proj.bias]),
                    _ => None,
                },
                trainable,
            );
            Ok(StepOutput {
                loss,
                terms: logged,
                grads,
                frozen_norms,
                selections: selections_of(&tape, &rets),
            })
        })
    }

    /// Prompts, pool and projector optimized together under the stage-1
    /// terms plus the unified objective.
    pub fn train_joint(&mut self, data: &Dataset) -> Result<PhaseSummary> {
        let cfg = self.cfg.clone();
        let tokens = [self.class_tokens(Component::Verb)?, self.class_tokens(Component::Noun)?];
        let frozen = [
            self.model
                .handcrafted_table(Component::Verb, &self.base_names(Component::Verb), &cfg.verb_template)?,
            self.model
                .handcrafted_table(Component::Noun, &self.base_names(Component::Noun), &cfg.noun_template)?,
        ];
        let pos = Component::ALL.map(|c| self.labels.positions(c, self.labels.base(c)));
        let trainable = Phase::Joint.trainable();
        let epochs = cfg.epochs_stage1 + cfg.epochs_stage2;
        self.run_phase(Phase::Joint, data.len(), epochs, |model, batch| {
            let mut tape = Tape::new();
            let bm = model.bind(&mut tape, trainable);
            let (feats, tables, frozen_vars) = {
                let clips: Vec<&[f32]> = batch.iter().map(|&i| data.clip(i)).collect();
                component_pass(&mut tape, model, &bm, &clips, &tokens, &frozen)?
            };
            let labels = [
                remap(&data.verbs, &pos[0], batch)?,
                remap(&data.nouns, &pos[1], batch)?,
            ];
            let mut rows = Vec::with_capacity(batch.len());
            let mut rets: [Vec<RetrievalVars>; 2] = [Vec::new(), Vec::new()];
            for b in 0..batch.len() {
                let fv = tape.gather_rows(feats[0], &[b])?;
                let fn_ = tape.gather_rows(feats[1], &[b])?;
                let (fs, r) = fuse_vars(&mut tape, &bm.pool, &bm.proj, [fv, fn_], cfg.k, cfg.tau_pool)?;
                let d = tape.value(fs).len();
                rows.push(tape.reshape(fs, vec![1, d])?);
                let [rv, rn] = r;
                rets[0].push(rv);
                rets[1].push(rn);
            }
            let fused = tape.concat_rows(&rows)?;
            let verb = ComponentBatch {
                feats: feats[0],
                table: tables[0],
                frozen: frozen_vars[0],
                labels: &labels[0],
            };
            let noun = ComponentBatch {
                feats: feats[1],
                table: tables[1],
                frozen: frozen_vars[1],
                labels: &labels[1],
            };
            let s1 = stage1_loss(&mut tape, &verb, &noun, &cfg.loss)?;
            let windows = [
                soft_frequency(&mut tape, &rets[0], cfg.pool_size)?,
                soft_frequency(&mut tape, &rets[1], cfg.pool_size)?,
            ];
            let ub = UnifiedBatch {
                fused,
                verb_table: tables[0],
                noun_table: tables[1],
                verb_labels: &labels[0],
                noun_labels: &labels[1],
                windows,
                pool: bm.pool,
            };
            let uni = unified_loss(&mut tape, &ub, &cfg.loss, cfg.k_freq())?;
            let total = tape.add(s1.total, uni.total)?;
            let loss = tape.scalar_value(total).widen();
            let mut logged = unified_terms_log(&tape, &uni);
            logged.push(("stage1", tape.scalar_value(s1.total).widen()));
            tape.backward(total)?;
            let (grads, frozen_norms) = grads_and_freeze(&tape, |g| Some(bm.group_vars(g)), trainable);
            Ok(StepOutput {
                loss,
                terms: logged,
                grads,
                frozen_norms,
                selections: selections_of(&tape, &rets),
            })
        })
    }

    /// Trains according to `cfg.variant`. Returns the checkpoints to keep,
    /// by stage.
    pub fn run_variant(&mut self, train: &Dataset) -> Result<Vec<Checkpoint<T>>> {
        let mut out = Vec::new();
        match self.cfg.variant {
            Variant::Stage1Only => {
                self.train_stage1(train)?;
                out.push(self.checkpoint(1));
            }
            Variant::Stage2Only => {
                self.train_stage2(train)?;
                out.push(self.checkpoint(2));
            }
            Variant::Joint => {
                self.train_joint(train)?;
                out.push(self.checkpoint(2));
            }
            Variant::TwoStage => {
                self.train_stage1(train)?;
                out.push(self.checkpoint(1));
                self.train_stage2(train)?;
                out.push(self.checkpoint(2));
            }
        }
        Ok(out)
    }

    /// Whether every recorded freeze contract holds.
    pub fn freeze_holds(&self) -> bool {
        self.freeze.iter().all(FreezeRecord::holds)
    }
}

type ComponentPass = ([Var; 2], [Var; 2], [Var; 2]);

/// Video features `[B, d]`, learned tables and frozen tables for both
/// components.
pub(crate) fn component_pass<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    bm: &crate::model::BoundModel,
    clips: &[&[f32]],
    tokens: &[ClassTokens<T>; 2],
    frozen: &[Tensor<T>; 2],
) -> Result<ComponentPass> {
    let mut feats = Vec::with_capacity(2);
    let mut tables = Vec::with_capacity(2);
    let mut frozen_vars = Vec::with_capacity(2);
    for c in Component::ALL {
        let ci = c.index();
        let vp = map_text_prompts_to_video(tape, &bm.prompts[ci])?;
        let mut rows = Vec::with_capacity(clips.len());
        for clip in clips {
            let clip = clip_var(tape, model.cfg(), clip)?;
            let f = encode_video(tape, &bm.enc, &vp, clip)?;
            let d = tape.value(f).len();
            rows.push(tape.reshape(f, vec![1, d])?);
        }
        feats.push(tape.concat_rows(&rows)?);
        tables.push(encode_text_classes(tape, &bm.enc, &bm.prompts[ci], &tokens[ci])?.embeddings);
        frozen_vars.push(tape.constant(frozen[ci].clone()));
    }
    Ok((
        [feats[0], feats[1]],
        [tables[0], tables[1]],
        [frozen_vars[0], frozen_vars[1]],
    ))
}

fn unified_terms_log<T: Scalar>(tape: &Tape<T>, t: &crate::objectives::UnifiedTerms) -> Vec<(&'static str, f64)> {
    vec![
        ("ce_verb", tape.scalar_value(t.ce[0]).widen()),
        ("ce_noun", tape.scalar_value(t.ce[1]).widen()),
        ("freq", tape.scalar_value(t.freq).widen()),
        ("orth", tape.scalar_value(t.orth).widen()),
    ]
}

fn selections_of<T: Scalar>(tape: &Tape<T>, rets: &[Vec<RetrievalVars>; 2]) -> Vec<(Component, Vec<usize>, Vec<T>)> {
    rets.iter()
        .flatten()
        .map(|r| (r.component, r.indices.clone(), tape.value(r.weights).data().to_vec()))
        .collect()
}

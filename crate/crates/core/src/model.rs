//! Complete parameter state of a run and the feature paths built on it.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::encoders::{
    encode_handcrafted_classes, encode_text_classes, encode_video, map_text_prompts_to_video, ClassTokens,
    ComponentPromptSet, EncoderConfig, EncoderVars, FrozenEncoders, PromptVars,
};
use crate::error::{Error, Result};
use crate::init::checksum;
use crate::numerics::{Tape, Tensor, Var};
use crate::pool::{
    fuse_patterns, project_fusion, retrieve_topk, FusionProjector, PoolVars, ProjectorVars, PromptPool,
    RetrievalVars,
};
use crate::scalar::Scalar;

/// Independently frozen/trained parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Encoders,
    VerbPrompts,
    NounPrompts,
    Pool,
    Projector,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoders,
        ParamGroup::VerbPrompts,
        ParamGroup::NounPrompts,
        ParamGroup::Pool,
        ParamGroup::Projector,
    ];

    pub fn prompts(c: Component) -> Self {
        match c {
            Component::Verb => ParamGroup::VerbPrompts,
            Component::Noun => ParamGroup::NounPrompts,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoders => "encoders",
            ParamGroup::VerbPrompts => "verb-prompts",
            ParamGroup::NounPrompts => "noun-prompts",
            ParamGroup::Pool => "pool",
            ParamGroup::Projector => "projector",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How first-layer text prompts start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptInit {
    /// Context-word embeddings of the component template.
    #[default]
    Template,
    /// Small Gaussian noise, like the deeper layers.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub encoders: FrozenEncoders<T>,
    /// Indexed by [`Component::index`].
    pub prompts: [ComponentPromptSet<T>; 2],
    pub pool: PromptPool<T>,
    pub projector: FusionProjector<T>,
}

/// Handles of a model placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub enc: EncoderVars,
    pub prompts: [PromptVars; 2],
    pub pool: PoolVars,
    pub proj: ProjectorVars,
}

impl BoundModel {
    /// Handles of `group`, in [`ModelState::tensors_mut`] order.
    pub fn group_vars(&self, group: ParamGroup) -> Vec<Var> {
        match group {
            ParamGroup::Encoders => self.enc.vars(),
            ParamGroup::VerbPrompts | ParamGroup::NounPrompts => {
                let p = &self.prompts[component_of(group).index()];
                (0..p.text_prompts.len())
                    .flat_map(|k| [p.text_prompts[k], p.proj_weights[k], p.proj_biases[k]])
                    .collect()
            }
            ParamGroup::Pool => vec![self.pool.queries, self.pool.values],
            ParamGroup::Projector => vec![self.proj.weight, self.proj.bias],
        }
    }
}

impl BoundModel {
    /// Replaces the handles of `group` with `vars`, given in
    /// [`BoundModel::group_vars`] order.
    pub fn set_group_vars(&mut self, group: ParamGroup, vars: &[Var]) -> Result<()> {
        let expected = self.group_vars(group).len();
        if vars.len() != expected {
            return Err(Error::dim("set_group_vars", &[vars.len()], &[expected]));
        }
        match group {
            ParamGroup::Encoders => return Err(Error::Usage("encoder handles cannot be replaced".into())),
            ParamGroup::VerbPrompts | ParamGroup::NounPrompts => {
                let p = &mut self.prompts[component_of(group).index()];
                for (k, chunk) in vars.chunks(3).enumerate() {
                    p.text_prompts[k] = chunk[0];
                    p.proj_weights[k] = chunk[1];
                    p.proj_biases[k] = chunk[2];
                }
            }
            ParamGroup::Pool => {
                self.pool.queries = vars[0];
                self.pool.values = vars[1];
            }
            ParamGroup::Projector => {
                self.proj.weight = vars[0];
                self.proj.bias = vars[1];
            }
        }
        Ok(())
    }
}

fn component_of(group: ParamGroup) -> Component {
    match group {
        ParamGroup::NounPrompts => Component::Noun,
        _ => Component::Verb,
    }
}

impl<T: Scalar> ModelState<T> {
    /// Fresh model; `templates` seed the first-layer prompts under
    /// [`PromptInit::Template`].
    pub fn init(
        seed: u64,
        cfg: &EncoderConfig,
        pool_size: usize,
        prompt_init: PromptInit,
        templates: [&str; 2],
    ) -> Result<Self> {
        let encoders = FrozenEncoders::init(seed, cfg)?;
        let mut prompts = Component::ALL.map(|c| ComponentPromptSet::init(c, cfg, seed));
        if prompt_init == PromptInit::Template {
            for c in Component::ALL {
                prompts[c.index()].seed_from_template(&encoders.vocab, templates[c.index()])?;
            }
        }
        Ok(Self {
            pool: PromptPool::init(pool_size, cfg.dim, seed)?,
            projector: FusionProjector::init(cfg.dim, seed),
            encoders,
            prompts,
        })
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.encoders.cfg
    }

    pub fn named_tensors(&self, group: ParamGroup) -> Vec<(String, &Tensor<T>)> {
        match group {
            ParamGroup::Encoders => self
                .encoders
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("encoders.{n}"), t))
                .collect(),
            ParamGroup::VerbPrompts | ParamGroup::NounPrompts => {
                self.prompts[component_of(group).index()].named_tensors()
            }
            ParamGroup::Pool => vec![
                ("pool.queries".into(), &self.pool.queries),
                ("pool.values".into(), &self.pool.values),
            ],
            ParamGroup::Projector => vec![
                ("projector.weight".into(), &self.projector.weight),
                ("projector.bias".into(), &self.projector.bias),
            ],
        }
    }

    /// Every tensor of the model in group order.
    pub fn all_named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        ParamGroup::ALL.iter().flat_map(|&g| self.named_tensors(g)).collect()
    }

    pub fn tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor<T>> {
        match group {
            ParamGroup::Encoders => self.encoders.tensors_mut(),
            ParamGroup::VerbPrompts | ParamGroup::NounPrompts => {
                self.prompts[component_of(group).index()].tensors_mut()
            }
            ParamGroup::Pool => vec![&mut self.pool.queries, &mut self.pool.values],
            ParamGroup::Projector => vec![&mut self.projector.weight, &mut self.projector.bias],
        }
    }

    /// Tensors of several groups at once, in [`ParamGroup::ALL`] order and
    /// within each group in [`ModelState::tensors_mut`] order.
    pub fn groups_mut(&mut self, groups: &[ParamGroup]) -> Vec<&mut Tensor<T>> {
        let ModelState {
            encoders,
            prompts,
            pool,
            projector,
        } = self;
        let [verb, noun] = prompts;
        let mut out = Vec::new();
        if groups.contains(&ParamGroup::Encoders) {
            out.extend(encoders.tensors_mut());
        }
        if groups.contains(&ParamGroup::VerbPrompts) {
            out.extend(verb.tensors_mut());
        }
        if groups.contains(&ParamGroup::NounPrompts) {
            out.extend(noun.tensors_mut());
        }
        if groups.contains(&ParamGroup::Pool) {
            out.push(&mut pool.queries);
            out.push(&mut pool.values);
        }
        if groups.contains(&ParamGroup::Projector) {
            out.push(&mut projector.weight);
            out.push(&mut projector.bias);
        }
        out
    }

    pub fn group_checksum(&self, group: ParamGroup) -> u32 {
        checksum(self.named_tensors(group).into_iter().map(|(_, t)| t))
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.named_tensors(group).iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            encoders: self.encoders.cast(),
            prompts: [self.prompts[0].cast(), self.prompts[1].cast()],
            pool: self.pool.cast(),
            projector: self.projector.cast(),
        }
    }

    /// Places every group on `tape`; groups in `trainable` become gradient
    /// leaves. Frozen encoders are always constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &[ParamGroup]) -> BoundModel {
        let on = |g: ParamGroup| trainable.contains(&g);
        BoundModel {
            enc: self.encoders.bind(tape),
            prompts: [
                self.prompts[0].bind(tape, on(ParamGroup::VerbPrompts)),
                self.prompts[1].bind(tape, on(ParamGroup::NounPrompts)),
            ],
            pool: self.pool.bind(tape, on(ParamGroup::Pool)),
            proj: self.projector.bind(tape, on(ParamGroup::Projector)),
        }
    }

    /// `[f_v, f_n]` of one clip (`[T*S*d]` values), off-tape.
    pub fn component_features(&self, clip: &[f32]) -> Result<[Vec<T>; 2]> {
        let mut tape = Tape::new();
        let bm = self.bind(&mut tape, &[]);
        let tokens = clip_var(&mut tape, self.cfg(), clip)?;
        let mut out: [Vec<T>; 2] = [Vec::new(), Vec::new()];
        for c in Component::ALL {
            let vp = map_text_prompts_to_video(&mut tape, &bm.prompts[c.index()])?;
            let f = encode_video(&mut tape, &bm.enc, &vp, tokens)?;
            out[c.index()] = tape.value(f).data().to_vec();
        }
        Ok(out)
    }

    /// Component features of many clips, computed in parallel; output
    /// order follows `clips`.
    pub fn batch_component_features(&self, clips: &[&[f32]]) -> Result<Vec<[Vec<T>; 2]>> {
        clips.par_iter().map(|c| self.component_features(c)).collect()
    }

    /// Fused feature `f_s` from component features, off-tape.
    pub fn fused_feature(&self, feats: &[Vec<T>; 2], k: usize, tau_pool: f64) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let pool = self.pool.bind(&mut tape, false);
        let proj = self.projector.bind(&mut tape, false);
        let (fs, _) = fuse_on_tape(&mut tape, &pool, &proj, feats, k, tau_pool)?;
        Ok(tape.value(fs).data().to_vec())
    }

    /// Learned class table `W^c` `[N, d]` for `labels` under `template`.
    pub fn class_table(&self, c: Component, labels: &[String], template: &str) -> Result<Tensor<T>> {
        let classes = ClassTokens::new(&self.encoders.vocab, c, labels, template)?;
        let mut tape = Tape::new();
        let enc = self.encoders.bind(&mut tape);
        let pv = self.prompts[c.index()].bind(&mut tape, false);
        let t = encode_text_classes(&mut tape, &enc, &pv, &classes)?;
        Ok(tape.value(t.embeddings).clone())
    }

    /// Hand-crafted template table (all prompt slots zero).
    pub fn handcrafted_table(&self, c: Component, labels: &[String], template: &str) -> Result<Tensor<T>> {
        let classes = ClassTokens::new(&self.encoders.vocab, c, labels, template)?;
        let mut tape = Tape::new();
        let enc = self.encoders.bind(&mut tape);
        let t = encode_handcrafted_classes(&mut tape, &enc, &classes)?;
        Ok(tape.value(t.embeddings).clone())
    }
}

/// Clip values `[T*S*d]` as a `[T*S, d]` constant.
pub fn clip_var<T: Scalar>(tape: &mut Tape<T>, cfg: &EncoderConfig, clip: &[f32]) -> Result<Var> {
    let n = cfg.clip_tokens();
    if clip.len() != n * cfg.dim {
        return Err(Error::dim("clip", &[clip.len()], &[n * cfg.dim]));
    }
    let data = clip.iter().map(|&v| T::of(v as f64)).collect();
    Ok(tape.constant(Tensor::new(vec![n, cfg.dim], data)?))
}

/// Retrieval for both components, fusion and projection of one sample
/// whose component features are given as constants.
pub fn fuse_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pool: &PoolVars,
    proj: &ProjectorVars,
    feats: &[Vec<T>; 2],
    k: usize,
    tau_pool: f64,
) -> Result<(Var, [RetrievalVars; 2])> {
    let fv = tape.constant(Tensor::vector(feats[0].clone()));
    let fn_ = tape.constant(Tensor::vector(feats[1].clone()));
    fuse_vars(tape, pool, proj, [fv, fn_], k, tau_pool)
}

/// Same as [`fuse_on_tape`] with features already on the tape (`[d]` or `[1, d]`).
pub fn fuse_vars<T: Scalar>(
    tape: &mut Tape<T>,
    pool: &PoolVars,
    proj: &ProjectorVars,
    feats: [Var; 2],
    k: usize,
    tau_pool: f64,
) -> Result<(Var, [RetrievalVars; 2])> {
    let mut fused = Vec::with_capacity(2);
    let mut rets = Vec::with_capacity(2);
    for c in Component::ALL {
        let f = feats[c.index()];
        let d = tape.value(f).len();
        let f = tape.reshape(f, vec![d])?;
        let r = retrieve_topk(tape, c, f, pool, k, tau_pool)?;
        fused.push(fuse_patterns(tape, &r, pool)?);
        rets.push(r);
    }
    let fs = project_fusion(tape, fused[0], fused[1], proj)?;
    let rn = rets.pop().expect("two retrievals");
    let rv = rets.pop().expect("two retrievals");
    Ok((fs, [rv, rn]))
}

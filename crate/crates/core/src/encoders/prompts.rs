use crate::component::Component;
use crate::error::{Error, Result};
use crate::init::{gaussian, rng_for, uniform};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::layers::INIT_STD;
use super::vocab::CLASS_PLACEHOLDER;
use super::{EncoderConfig, Vocabulary};

/// Learnable per-layer text prompts and text-to-video projections for one
/// component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentPromptSet<T> {
    pub component: Component,
    /// `K` tensors of shape `[L_t, d]`.
    pub text_prompts: Vec<Tensor<T>>,
    /// `K` token-wise projection weights `[d, d]`.
    pub proj_weights: Vec<Tensor<T>>,
    /// `K` projection biases `[d]`.
    pub proj_biases: Vec<Tensor<T>>,
    /// Fixed `[L_v, L_t]` linear resampling along the token axis.
    pub resample: Tensor<T>,
}

/// Tape handles of a bound prompt set.
#[derive(Clone, Debug)]
pub struct PromptVars {
    pub component: Component,
    pub text_prompts: Vec<Var>,
    pub proj_weights: Vec<Var>,
    pub proj_biases: Vec<Var>,
    resample: Option<Var>,
}

/// Linear interpolation matrix mapping `from` tokens to `to` tokens;
/// the identity when the lengths agree.
pub fn resample_matrix<T: Scalar>(to: usize, from: usize) -> Tensor<T> {
    if to == from {
        return Tensor::identity(to);
    }
    let mut m = Tensor::<T>::zeros(vec![to, from]);
    for i in 0..to {
        let x = if to == 1 {
            (from - 1) as f64 / 2.0
        } else {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let lo = x.floor() as usize;
        let frac = x - lo as f64;
        m.data_mut()[i * from + lo] = T::of(1.0 - frac);
        if frac > 0.0 {
            m.data_mut()[i * from + lo + 1] = T::of(frac);
        }
    }
    m
}

impl<T: Scalar> ComponentPromptSet<T> {
    /// Text prompts `N(0, 0.02^2)`; projections uniform `±1/sqrt(d)` with
    /// zero bias.
    pub fn init(component: Component, cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x100 + component.index() as u64);
        let d = cfg.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut text_prompts = Vec::with_capacity(cfg.depth);
        let mut proj_weights = Vec::with_capacity(cfg.depth);
        let mut proj_biases = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            text_prompts.push(gaussian(&mut rng, &[cfg.text_prompt_len, d], INIT_STD));
            proj_weights.push(uniform(&mut rng, &[d, d], bound));
            proj_biases.push(Tensor::zeros(vec![d]));
        }
        Self {
            component,
            text_prompts,
            proj_weights,
            proj_biases,
            resample: resample_matrix(cfg.video_prompt_len, cfg.text_prompt_len),
        }
    }

    /// Overwrites the first-layer text prompts with the embeddings of the
    /// template's context words (placeholder removed), cycled to `L_t`.
    pub fn seed_from_template(&mut self, vocab: &Vocabulary, template: &str) -> Result<()> {
        if !template.contains(CLASS_PLACEHOLDER) {
            return Err(Error::Template(format!(
                "template {template:?} has no {CLASS_PLACEHOLDER} placeholder"
            )));
        }
        let words = Vocabulary::tokenize(&template.replace(CLASS_PLACEHOLDER, " "));
        if words.is_empty() {
            return Err(Error::Template(format!("template {template:?} has no context words")));
        }
        let first = &mut self.text_prompts[0];
        let d = first.cols();
        for (i, row) in first.data_mut().chunks_mut(d).enumerate() {
            let e = vocab.embed(&words[i % words.len()]);
            row.iter_mut().zip(e).for_each(|(x, v)| *x = T::of(v));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.text_prompts.len()
    }

    /// Named trainable tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let c = self.component.name();
        let mut out = Vec::new();
        for k in 0..self.depth() {
            out.push((format!("prompts.{c}.text.{k}"), &self.text_prompts[k]));
            out.push((format!("prompts.{c}.proj_w.{k}"), &self.proj_weights[k]));
            out.push((format!("prompts.{c}.proj_b.{k}"), &self.proj_biases[k]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for ((p, w), b) in self
            .text_prompts
            .iter_mut()
            .zip(self.proj_weights.iter_mut())
            .zip(self.proj_biases.iter_mut())
        {
            out.push(p);
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ComponentPromptSet<U> {
        ComponentPromptSet {
            component: self.component,
            text_prompts: self.text_prompts.iter().map(Tensor::cast).collect(),
            proj_weights: self.proj_weights.iter().map(Tensor::cast).collect(),
            proj_biases: self.proj_biases.iter().map(Tensor::cast).collect(),
            resample: self.resample.cast(),
        }
    }

    /// Places the prompt set on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> PromptVars {
        let mut put = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        let text_prompts = self.text_prompts.iter().map(&mut put).collect();
        let proj_weights = self.proj_weights.iter().map(&mut put).collect();
        let proj_biases = self.proj_biases.iter().map(&mut put).collect();
        let is_identity = self.resample.shape()[0] == self.resample.shape()[1]
            && self.resample == Tensor::identity(self.resample.shape()[0]);
        let resample = (!is_identity).then(|| tape.constant(self.resample.clone()));
        PromptVars {
            component: self.component,
            text_prompts,
            proj_weights,
            proj_biases,
            resample,
        }
    }
}

/// `p_v^k = R (p_t^k W_k + b_k)` for every layer `k`.
pub fn map_text_prompts_to_video<T: Scalar>(tape: &mut Tape<T>, p: &PromptVars) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(p.text_prompts.len());
    for k in 0..p.text_prompts.len() {
        let h = tape.matmul(p.text_prompts[k], p.proj_weights[k])?;
        let h = tape.add_row(h, p.proj_biases[k])?;
        out.push(match p.resample {
            Some(r) => tape.matmul(r, h)?,
            None => h,
        });
    }
    Ok(out)
}

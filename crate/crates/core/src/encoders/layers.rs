//! Frozen transformer building blocks and their tape bindings.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{gaussian, near_identity};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::EncoderConfig;

pub const INIT_STD: f64 = 0.02;
const MASKED: f64 = -1e9;

/// Multi-head self-attention without biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// Pre-norm two-layer GELU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextLayer<T> {
    pub attn: Attention<T>,
    pub mlp: Mlp<T>,
}

/// Divided space-time block: temporal attention, spatial attention, MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBlock<T> {
    pub time_attn: Attention<T>,
    pub space_attn: Attention<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            wq: gaussian(rng, &[d, d], INIT_STD),
            wk: gaussian(rng, &[d, d], INIT_STD),
            wv: near_identity(rng, d, INIT_STD),
            wo: near_identity(rng, d, INIT_STD),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: Tensor::zeros(vec![d, d]),
            wo: Tensor::zeros(vec![d, d]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    fn cast<U: Scalar>(&self) -> Attention<U> {
        Attention {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> AttentionVars {
        AttentionVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            wo: tape.constant(self.wo.clone()),
        }
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Self {
        Self {
            ln_gamma: Tensor::filled(vec![d], T::one()),
            ln_beta: Tensor::zeros(vec![d]),
            w1: gaussian(rng, &[d, hidden], INIT_STD),
            b1: Tensor::zeros(vec![hidden]),
            w2: gaussian(rng, &[hidden, d], INIT_STD),
            b2: Tensor::zeros(vec![d]),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            ln_gamma: Tensor::filled(vec![d], T::one()),
            ln_beta: Tensor::zeros(vec![d]),
            w1: Tensor::zeros(vec![d, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, d]),
            b2: Tensor::zeros(vec![d]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 6] {
        [&self.ln_gamma, &self.ln_beta, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            ln_gamma: self.ln_gamma.cast(),
            ln_beta: self.ln_beta.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> MlpVars {
        MlpVars {
            ln_gamma: tape.constant(self.ln_gamma.clone()),
            ln_beta: tape.constant(self.ln_beta.clone()),
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }
}

impl<T: Scalar> TextLayer<T> {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Self {
        Self {
            attn: Attention::init(rng, cfg.dim),
            mlp: Mlp::init(rng, cfg.dim, cfg.hidden()),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let names = ["attn.wq", "attn.wk", "attn.wv", "attn.wo"];
        let mlp = ["mlp.ln_gamma", "mlp.ln_beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];
        names
            .into_iter()
            .zip(self.attn.tensors())
            .chain(mlp.into_iter().zip(self.mlp.tensors()))
            .collect()
    }

    /// Same order as [`TextLayer::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.attn.tensors_mut().into_iter().collect();
        out.extend(self.mlp.tensors_mut());
        out
    }

    pub fn cast<U: Scalar>(&self) -> TextLayer<U> {
        TextLayer {
            attn: self.attn.cast(),
            mlp: self.mlp.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> TextLayerVars {
        TextLayerVars {
            attn: self.attn.bind(tape),
            mlp: self.mlp.bind(tape),
        }
    }
}

impl<T: Scalar> VideoBlock<T> {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Self {
        Self {
            time_attn: Attention::init(rng, cfg.dim),
            space_attn: Attention::init(rng, cfg.dim),
            mlp: Mlp::init(rng, cfg.dim, cfg.hidden()),
        }
    }

    /// Block whose attention and MLP branches all output zero.
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            time_attn: Attention::zeros(d),
            space_attn: Attention::zeros(d),
            mlp: Mlp::zeros(d, hidden),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let time = ["time.wq", "time.wk", "time.wv", "time.wo"];
        let space = ["space.wq", "space.wk", "space.wv", "space.wo"];
        let mlp = ["mlp.ln_gamma", "mlp.ln_beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];
        time.into_iter()
            .zip(self.time_attn.tensors())
            .chain(space.into_iter().zip(self.space_attn.tensors()))
            .chain(mlp.into_iter().zip(self.mlp.tensors()))
            .collect()
    }

    /// Same order as [`VideoBlock::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.time_attn.tensors_mut().into_iter().collect();
        out.extend(self.space_attn.tensors_mut());
        out.extend(self.mlp.tensors_mut());
        out
    }

    pub fn cast<U: Scalar>(&self) -> VideoBlock<U> {
        VideoBlock {
            time_attn: self.time_attn.cast(),
            space_attn: self.space_attn.cast(),
            mlp: self.mlp.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> VideoBlockVars {
        VideoBlockVars {
            time_attn: self.time_attn.bind(tape),
            space_attn: self.space_attn.bind(tape),
            mlp: self.mlp.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TextLayerVars {
    pub attn: AttentionVars,
    pub mlp: MlpVars,
}

#[derive(Clone, Copy, Debug)]
pub struct VideoBlockVars {
    pub time_attn: AttentionVars,
    pub space_attn: AttentionVars,
    pub mlp: MlpVars,
}

/// Multi-head attention of the rows of `x` (`[n, d]`) with an optional
/// additive `[n, n]` mask.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    w: &AttentionVars,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::param("heads", format!("{heads} does not divide {d}")));
    }
    let dh = d / heads;
    let tau = T::of((dh as f64).sqrt());
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let mut s = tape.matmul(qh, kt)?;
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let p = tape.softmax_rows(s, tau)?;
        outs.push(tape.matmul(p, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(o, w.wo)
}

impl AttentionVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

impl MlpVars {
    pub fn vars(&self) -> [Var; 6] {
        [self.ln_gamma, self.ln_beta, self.w1, self.b1, self.w2, self.b2]
    }
}

impl TextLayerVars {
    pub fn vars(&self) -> Vec<Var> {
        self.attn.vars().into_iter().chain(self.mlp.vars()).collect()
    }
}

impl VideoBlockVars {
    pub fn vars(&self) -> Vec<Var> {
        self.time_attn
            .vars()
            .into_iter()
            .chain(self.space_attn.vars())
            .chain(self.mlp.vars())
            .collect()
    }
}

pub fn mlp<T: Scalar>(tape: &mut Tape<T>, w: &MlpVars, x: Var) -> Result<Var> {
    let n = tape.layer_norm(x, w.ln_gamma, w.ln_beta)?;
    let h = tape.matmul(n, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, w.w2)?;
    tape.add_row(o, w.b2)
}

/// One text transformer layer: residual attention then residual MLP.
pub fn text_layer<T: Scalar>(tape: &mut Tape<T>, w: &TextLayerVars, heads: usize, x: Var) -> Result<Var> {
    let a = attention(tape, &w.attn, x, heads, None)?;
    let z = tape.add(x, a)?;
    let m = mlp(tape, &w.mlp, z)?;
    tape.add(z, m)
}

/// Token layout of a clip for the divided space-time block: `T * S` patch
/// tokens in frame-major order followed by `L_v` prompt tokens.
#[derive(Clone, Debug)]
pub struct VideoLayout {
    pub frames: usize,
    pub patches: usize,
    pub prompts: usize,
}

/// Tape handles for the structural constants of a [`VideoLayout`].
#[derive(Clone, Debug)]
pub struct LayoutVars {
    layout: VideoLayout,
    time_mask: Var,
    space_mask: Var,
    expand_idx: Vec<usize>,
    fold: Var,
    patch_idx: Vec<usize>,
    prompt_idx: Vec<usize>,
}

impl VideoLayout {
    pub fn from_config(cfg: &EncoderConfig) -> Self {
        Self {
            frames: cfg.frames,
            patches: cfg.patches,
            prompts: cfg.video_prompt_len,
        }
    }

    pub fn patch_tokens(&self) -> usize {
        self.frames * self.patches
    }

    pub fn total_tokens(&self) -> usize {
        self.patch_tokens() + self.prompts
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> LayoutVars {
        let (nt, ns, np) = (self.frames, self.patches, self.prompts);
        let n = nt * ns;
        let masked = T::of(MASKED);

        // patches attend across frames at the same spatial index
        let mut time = Tensor::<T>::filled(vec![n, n], masked);
        for i in 0..n {
            for j in 0..n {
                if i % ns == j % ns {
                    time.data_mut()[i * n + j] = T::zero();
                }
            }
        }

        // each frame's patches plus a copy of the prompt tokens
        let group = ns + np;
        let m = nt * group;
        let mut expand_idx = Vec::with_capacity(m);
        for t in 0..nt {
            expand_idx.extend(t * ns..(t + 1) * ns);
            expand_idx.extend(n..n + np);
        }
        let mut space = Tensor::<T>::filled(vec![m, m], masked);
        for i in 0..m {
            for j in 0..m {
                if i / group == j / group {
                    space.data_mut()[i * m + j] = T::zero();
                }
            }
        }

        // folds the expanded rows back: patches copied, prompts averaged over frames
        let mut fold = Tensor::<T>::zeros(vec![n + np, m]);
        let inv_t = T::of(1.0 / nt as f64);
        for t in 0..nt {
            for s in 0..ns {
                fold.data_mut()[(t * ns + s) * m + t * group + s] = T::one();
            }
            for p in 0..np {
                fold.data_mut()[(n + p) * m + t * group + ns + p] = inv_t;
            }
        }

        LayoutVars {
            layout: self.clone(),
            time_mask: tape.constant(time),
            space_mask: tape.constant(space),
            expand_idx,
            fold: tape.constant(fold),
            patch_idx: (0..n).collect(),
            prompt_idx: (n..n + np).collect(),
        }
    }
}

impl LayoutVars {
    pub fn layout(&self) -> &VideoLayout {
        &self.layout
    }

    pub(crate) fn patch_idx(&self) -> &[usize] {
        &self.patch_idx
    }
}

/// `z = TimeAttn(e) + e; z' = SpaceAttn(z) + z; out = MLP(z') + z'` on a
/// `[T*S + L_v, d]` token matrix. Prompt tokens skip temporal attention and
/// join the spatial attention of every frame; their spatial outputs are
/// averaged over frames.
pub fn divided_spacetime_block<T: Scalar>(
    tape: &mut Tape<T>,
    w: &VideoBlockVars,
    lv: &LayoutVars,
    heads: usize,
    e: Var,
) -> Result<Var> {
    let total = lv.layout.total_tokens();
    if tape.shape(e).len() != 2 || tape.shape(e)[0] != total {
        return Err(Error::dim("divided_spacetime_block", tape.shape(e), &[total, 0]));
    }
    let patches = tape.gather_rows(e, &lv.patch_idx)?;
    let ta = attention(tape, &w.time_attn, patches, heads, Some(lv.time_mask))?;
    let zp = tape.add(patches, ta)?;
    let z = if lv.layout.prompts > 0 {
        let prompts = tape.gather_rows(e, &lv.prompt_idx)?;
        tape.concat_rows(&[zp, prompts])?
    } else {
        zp
    };
    let expanded = tape.gather_rows(z, &lv.expand_idx)?;
    let sa = attention(tape, &w.space_attn, expanded, heads, Some(lv.space_mask))?;
    let back = tape.matmul(lv.fold, sa)?;
    let z2 = tape.add(z, back)?;
    let m = mlp(tape, &w.mlp, z2)?;
    tape.add(z2, m)
}

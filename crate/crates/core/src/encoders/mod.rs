//! Frozen toy dual encoder with layer-wise prompt injection.

mod config;
pub mod layers;
mod prompts;
mod vocab;

pub use config::EncoderConfig;
pub use layers::{divided_spacetime_block, LayoutVars, TextLayer, VideoBlock, VideoLayout};
pub use prompts::{map_text_prompts_to_video, resample_matrix, ComponentPromptSet, PromptVars};
pub use vocab::{Vocabulary, CLASS_PLACEHOLDER, EOS, VOCAB_ROWS};

use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::error::{Error, Result};
use crate::init::{checksum, rng_for};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

use layers::{text_layer, TextLayerVars, VideoBlockVars};

pub const VERB_TEMPLATE: &str = "a video of a [CLASS] action";
pub const NOUN_TEMPLATE: &str = "a video of actioning on [CLASS]";

pub fn default_template(c: Component) -> &'static str {
    match c {
        Component::Verb => VERB_TEMPLATE,
        Component::Noun => NOUN_TEMPLATE,
    }
}

/// Frozen text and video towers.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoders<T> {
    pub cfg: EncoderConfig,
    pub vocab: Vocabulary,
    pub text: Vec<TextLayer<T>>,
    pub video: Vec<VideoBlock<T>>,
}

impl<T: Scalar> FrozenEncoders<T> {
    /// Seeded frozen weights. Query/key and MLP matrices are `N(0, 0.02^2)`;
    /// value/output matrices are the identity plus the same noise.
    pub fn init(seed: u64, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, 1);
        let text = (0..cfg.depth).map(|_| TextLayer::init(&mut rng, cfg)).collect();
        let video = (0..cfg.depth).map(|_| VideoBlock::init(&mut rng, cfg)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            vocab: Vocabulary::new(cfg.dim),
            text,
            video,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, l) in self.text.iter().enumerate() {
            out.extend(l.tensors().into_iter().map(|(n, t)| (format!("text.{k}.{n}"), t)));
        }
        for (k, b) in self.video.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("video.{k}.{n}"), t)));
        }
        out
    }

    /// Same order as [`FrozenEncoders::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.text {
            out.extend(l.tensors_mut());
        }
        for b in &mut self.video {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// CRC32 of all frozen weights, for freeze-contract checks.
    pub fn checksum(&self) -> u32 {
        checksum(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    pub fn cast<U: Scalar>(&self) -> FrozenEncoders<U> {
        FrozenEncoders {
            cfg: self.cfg.clone(),
            vocab: self.vocab,
            text: self.text.iter().map(TextLayer::cast).collect(),
            video: self.video.iter().map(VideoBlock::cast).collect(),
        }
    }

    /// Places the frozen weights on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> EncoderVars {
        EncoderVars {
            cfg: self.cfg.clone(),
            text: self.text.iter().map(|l| l.bind(tape)).collect(),
            video: self.video.iter().map(|b| b.bind(tape)).collect(),
            layout: VideoLayout::from_config(&self.cfg).bind(tape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    cfg: EncoderConfig,
    text: Vec<TextLayerVars>,
    video: Vec<VideoBlockVars>,
    layout: LayoutVars,
}

impl EncoderVars {
    pub fn cfg(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Handles of every frozen weight, in [`FrozenEncoders::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.text.iter().flat_map(TextLayerVars::vars).collect();
        out.extend(self.video.iter().flat_map(VideoBlockVars::vars));
        out
    }
}

/// Tokenized class prompts for one label set under one template.
#[derive(Clone, Debug)]
pub struct ClassTokens<T> {
    pub component: Component,
    pub labels: Vec<String>,
    pub template: String,
    /// Per class, `[n_tokens + 1, d]` with the end-of-sequence token last.
    pub sequences: Vec<Tensor<T>>,
}

impl<T: Scalar> ClassTokens<T> {
    pub fn new(vocab: &Vocabulary, component: Component, labels: &[String], template: &str) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Usage(format!("no {component} labels to encode")));
        }
        let sequences = labels
            .iter()
            .map(|l| vocab.encode_sequence(template, l))
            .collect::<Result<_>>()?;
        Ok(Self {
            component,
            labels: labels.to_vec(),
            template: template.to_string(),
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableSource {
    Learned,
    FrozenTemplate,
}

/// Class embeddings `[N, d]` with L2-normalized rows.
#[derive(Clone, Copy, Debug)]
pub struct ClassEmbeddingTable {
    pub component: Component,
    pub source: TableSource,
    pub embeddings: Var,
}

fn run_text<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderVars,
    prompts: &[Var],
    seq: &Tensor<T>,
) -> Result<Var> {
    let n = seq.shape()[0];
    let tokens = tape.constant(seq.clone());
    let token_idx: Vec<usize> = (0..n).collect();
    let mut x = tape.concat_rows(&[tokens, prompts[0]])?;
    for (k, layer) in enc.text.iter().enumerate() {
        if k > 0 && enc.cfg.deep_prompting {
            let kept = tape.gather_rows(x, &token_idx)?;
            x = tape.concat_rows(&[kept, prompts[k]])?;
        }
        x = text_layer(tape, layer, enc.cfg.heads, x)?;
    }
    tape.gather_rows(x, &[n - 1])
}

fn text_table<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderVars,
    prompts: &[Var],
    classes: &ClassTokens<T>,
) -> Result<Var> {
    if prompts.len() != enc.cfg.depth {
        return Err(Error::dim("encode_text_classes", &[prompts.len()], &[enc.cfg.depth]));
    }
    let rows = classes
        .sequences
        .iter()
        .map(|s| run_text(tape, enc, prompts, s))
        .collect::<Result<Vec<_>>>()?;
    let table = tape.concat_rows(&rows)?;
    tape.l2_normalize_rows(table)
}

/// Learned class table `W^c`: each class sequence runs through the text
/// tower with the component's text prompts occupying `L_t` slots, replaced
/// at every layer when deep prompting is on; the end-of-sequence output is
/// the class row.
pub fn encode_text_classes<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderVars,
    prompts: &PromptVars,
    classes: &ClassTokens<T>,
) -> Result<ClassEmbeddingTable> {
    let embeddings = text_table(tape, enc, &prompts.text_prompts, classes)?;
    Ok(ClassEmbeddingTable {
        component: classes.component,
        source: TableSource::Learned,
        embeddings,
    })
}

/// Frozen template table: the learned path with all prompt tokens zero,
/// recorded without gradient tracking.
pub fn encode_handcrafted_classes<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderVars,
    classes: &ClassTokens<T>,
) -> Result<ClassEmbeddingTable> {
    let zero = Tensor::<T>::zeros(vec![enc.cfg.text_prompt_len, enc.cfg.dim]);
    let prompts: Vec<Var> = (0..enc.cfg.depth).map(|_| tape.constant(zero.clone())).collect();
    let embeddings = text_table(tape, enc, &prompts, classes)?;
    let frozen = tape.value(embeddings).clone();
    Ok(ClassEmbeddingTable {
        component: classes.component,
        source: TableSource::FrozenTemplate,
        embeddings: tape.constant(frozen),
    })
}

/// Component feature `f_c`: the clip tokens `[T*S, d]` (or `[T, S, d]`)
/// pass through the video tower with the layer's video prompts appended;
/// patch outputs are mean-pooled and L2-normalized.
pub fn encode_video<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderVars,
    video_prompts: &[Var],
    tokens: Var,
) -> Result<Var> {
    let cfg = &enc.cfg;
    let shape = tape.shape(tokens).to_vec();
    let expected_3d = [cfg.frames, cfg.patches, cfg.dim];
    let expected_2d = [cfg.clip_tokens(), cfg.dim];
    let tokens = if shape == expected_3d {
        tape.reshape(tokens, expected_2d.to_vec())?
    } else if shape == expected_2d {
        tokens
    } else {
        return Err(Error::dim("encode_video", &shape, &expected_3d));
    };
    if video_prompts.len() != cfg.depth {
        return Err(Error::dim("encode_video", &[video_prompts.len()], &[cfg.depth]));
    }
    let mut x = tape.concat_rows(&[tokens, video_prompts[0]])?;
    for (k, block) in enc.video.iter().enumerate() {
        if k > 0 && cfg.deep_prompting {
            let kept = tape.gather_rows(x, enc.layout.patch_idx())?;
            x = tape.concat_rows(&[kept, video_prompts[k]])?;
        }
        x = divided_spacetime_block(tape, block, &enc.layout, cfg.heads, x)?;
    }
    let patches = tape.gather_rows(x, enc.layout.patch_idx())?;
    let pooled = tape.mean_rows(patches)?;
    tape.l2_normalize_rows(pooled)
}

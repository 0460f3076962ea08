use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the toy dual encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Transformer depth, shared by the text and video towers.
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub text_prompt_len: usize,
    pub video_prompt_len: usize,
    pub frames: usize,
    pub patches: usize,
    /// Hidden width of the MLP, as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub deep_prompting: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 32,
            heads: 4,
            text_prompt_len: 4,
            video_prompt_len: 4,
            frames: 4,
            patches: 4,
            mlp_ratio: 2,
            deep_prompting: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.depth", self.depth),
            ("encoder.dim", self.dim),
            ("encoder.heads", self.heads),
            ("encoder.text_prompt_len", self.text_prompt_len),
            ("encoder.video_prompt_len", self.video_prompt_len),
            ("encoder.frames", self.frames),
            ("encoder.patches", self.patches),
            ("encoder.mlp_ratio", self.mlp_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config {
                key: "encoder.heads".into(),
                reason: format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Patch tokens per clip, `T * S`.
    pub fn clip_tokens(&self) -> usize {
        self.frames * self.patches
    }

    /// Closed-form count of frozen base weights in both towers.
    pub fn frozen_param_count(&self) -> usize {
        let d = self.dim;
        let h = self.hidden();
        let attn = 4 * d * d;
        let mlp = 2 * d + d * h + h + h * d + d;
        self.depth * ((attn + mlp) + (2 * attn + mlp))
    }

    /// Trainable parameters of one component prompt set.
    pub fn prompt_param_count(&self) -> usize {
        let d = self.dim;
        self.depth * (self.text_prompt_len * d + d * d + d)
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, NOUN_TEMPLATE, VERB_TEMPLATE};
use crate::error::{Error, Result};
use crate::model::PromptInit;
use crate::objectives::LossWeights;

/// Training schedule, as the four rows of the module ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Component prompts only; classification with `f_c`.
    Stage1Only,
    /// Pool and projector on top of untrained prompts.
    Stage2Only,
    /// Prompts, pool and projector together from scratch.
    Joint,
    /// Stage 1, then stage 2 with the prompts frozen.
    #[default]
    TwoStage,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Stage1Only, Variant::Stage2Only, Variant::Joint, Variant::TwoStage];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Stage1Only => "stage1-only",
            Variant::Stage2Only => "stage2-only",
            Variant::Joint => "joint",
            Variant::TwoStage => "two-stage",
        }
    }

    /// Whether the trained model classifies with the fused feature.
    pub fn uses_pool(self) -> bool {
        self != Variant::Stage1Only
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config {
                key: "train.variant".into(),
                reason: format!("unknown variant {s:?}; expected one of stage1-only, stage2-only, joint, two-stage"),
            })
    }
}

/// Optimization and model hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_floor_lr: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pool_size: usize,
    /// Top-k retrieval size.
    pub k: usize,
    pub tau_pool: f64,
    pub variant: Variant,
    pub prompt_init: PromptInit,
    pub verb_template: String,
    pub noun_template: String,
    /// A step loss above this (or non-finite) aborts the run.
    pub divergence_threshold: f64,
    pub loss: LossWeights,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_epochs: 2,
            warmup_floor_lr: 2e-5,
            epochs_stage1: 5,
            epochs_stage2: 5,
            batch_size: 32,
            seed: 0,
            pool_size: 16,
            k: 4,
            tau_pool: 0.07,
            variant: Variant::TwoStage,
            prompt_init: PromptInit::Template,
            verb_template: VERB_TEMPLATE.into(),
            noun_template: NOUN_TEMPLATE.into(),
            divergence_threshold: 1e6,
            loss: LossWeights::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    /// Schedule sized for a laptop CPU on the default synthetic benchmark.
    /// Learning rates are larger and stages longer than the defaults,
    /// which assume a pretrained backbone.
    pub fn desk_scale() -> Self {
        Self {
            lr: 1e-2,
            warmup_floor_lr: 2e-3,
            epochs_stage1: 8,
            epochs_stage2: 8,
            ..Self::default()
        }
    }

    pub fn templates(&self) -> [&str; 2] {
        [&self.verb_template, &self.noun_template]
    }

    pub fn total_epochs(&self) -> usize {
        match self.variant {
            Variant::Stage1Only => self.epochs_stage1,
            Variant::Stage2Only => self.epochs_stage2,
            Variant::Joint | Variant::TwoStage => self.epochs_stage1 + self.epochs_stage2,
        }
    }

    /// `k_freq`, defaulting to the retrieval `k`.
    pub fn k_freq(&self) -> usize {
        self.loss.k_freq.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (key, v) in [
            ("train.lr", self.lr),
            ("train.warmup_floor_lr", self.warmup_floor_lr),
            ("train.eps", self.eps),
            ("train.tau_pool", self.tau_pool),
            ("train.divergence_threshold", self.divergence_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(key, format!("must be positive and finite, got {v}")));
            }
        }
        for (key, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err("train.weight_decay", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err("train.batch_size", "must be at least 1"));
        }
        if self.pool_size == 0 {
            return Err(config_err("train.pool_size", "must be at least 1"));
        }
        if self.k == 0 || self.k > self.pool_size {
            return Err(config_err(
                "train.k",
                format!("must be in 1..={} (pool size), got {}", self.pool_size, self.k),
            ));
        }
        if self.pool_size < 2 && self.loss.lambda_orth > 0.0 {
            return Err(config_err("train.pool_size", "orthogonality term needs at least 2 prompts"));
        }
        self.loss.validate(self.pool_size)?;
        for (key, epochs) in [
            ("train.epochs_stage1", self.epochs_stage1),
            ("train.epochs_stage2", self.epochs_stage2),
        ] {
            if epochs > 0 && self.warmup_epochs >= epochs {
                return Err(config_err(
                    "train.warmup_epochs",
                    format!("{} warm-up epochs must be fewer than {key} = {epochs}", self.warmup_epochs),
                ));
            }
        }
        Ok(())
    }
}

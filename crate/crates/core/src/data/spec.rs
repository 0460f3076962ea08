use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VERBS: [&str; 8] = ["take", "put", "cut", "open", "close", "wash", "pour", "stir"];
pub const DEFAULT_NOUNS: [&str; 12] = [
    "knife", "cup", "bowl", "plate", "spoon", "pan", "bottle", "lid", "bag", "onion", "tap", "drawer",
];

/// Shift applied to the second domain: a rotation by `rotation_angle`
/// radians in every plane of a seeded orthonormal basis, then additive
/// Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub rotation_angle: f64,
    pub noise_std: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            rotation_angle: 0.5,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub n_verbs: usize,
    pub n_nouns: usize,
    /// Label names; empty means the built-in kitchen vocabulary.
    pub verb_names: Vec<String>,
    pub noun_names: Vec<String>,
    /// Explicit `n_verbs x n_nouns` compatibility; `None` draws one.
    pub compat: Option<Vec<Vec<bool>>>,
    /// Density of the drawn compatibility matrix.
    pub compat_density: f64,
    pub samples_per_split: usize,
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    /// Fraction of patch positions per frame filled with clutter.
    pub clutter_ratio: f64,
    /// Amplitude of the verb factor relative to the noun factor.
    pub verb_scale: f64,
    /// Per-coordinate noise std on every token.
    pub token_noise: f64,
    /// Probability that a clutter token carries a random distractor object.
    pub distractor_prob: f64,
    /// Number of shared background vectors clutter is drawn from.
    pub background_pool: usize,
    pub domain_shift: DomainShift,
    /// Fraction of verb and of noun labels held out as novel.
    pub novel_fraction: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_verbs: 8,
            n_nouns: 12,
            verb_names: Vec::new(),
            noun_names: Vec::new(),
            compat: None,
            compat_density: 0.2,
            samples_per_split: 512,
            frames: 4,
            patches: 4,
            dim: 32,
            clutter_ratio: 0.5,
            verb_scale: 0.3,
            token_noise: 0.1,
            distractor_prob: 0.3,
            background_pool: 8,
            domain_shift: DomainShift::default(),
            novel_fraction: 0.25,
        }
    }
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

fn names(given: &[String], defaults: &[&str], n: usize, prefix: &str) -> Vec<String> {
    if !given.is_empty() {
        return given.to_vec();
    }
    (0..n)
        .map(|i| match defaults.get(i) {
            Some(s) => s.to_string(),
            None => format!("{prefix}{i}"),
        })
        .collect()
}

impl BenchmarkSpec {
    pub fn verb_labels(&self) -> Vec<String> {
        names(&self.verb_names, &DEFAULT_VERBS, self.n_verbs, "verb")
    }

    pub fn noun_labels(&self) -> Vec<String> {
        names(&self.noun_names, &DEFAULT_NOUNS, self.n_nouns, "noun")
    }

    /// Number of novel labels out of `n`, keeping at least one base label.
    pub fn novel_count(&self, n: usize) -> usize {
        ((self.novel_fraction * n as f64).round() as usize).min(n.saturating_sub(1))
    }

    /// Clutter positions per frame; at least one position holds the HOI.
    pub fn clutter_per_frame(&self) -> usize {
        ((self.clutter_ratio * self.patches as f64).round() as usize).min(self.patches - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_verbs == 0 || self.n_nouns == 0 {
            return Err(spec_err("need at least one verb and one noun"));
        }
        if self.frames == 0 || self.patches == 0 || self.dim == 0 {
            return Err(spec_err("frames, patches and dim must be positive"));
        }
        if self.samples_per_split == 0 {
            return Err(spec_err("samples_per_split must be positive"));
        }
        if self.verb_labels().len() != self.n_verbs || self.noun_labels().len() != self.n_nouns {
            return Err(spec_err("label name lists do not match n_verbs/n_nouns"));
        }
        for (what, v) in [
            ("clutter_ratio", self.clutter_ratio),
            ("novel_fraction", self.novel_fraction),
            ("distractor_prob", self.distractor_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(spec_err(format!("{what} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.compat_density > 0.0 && self.compat_density <= 1.0) {
            return Err(spec_err(format!("compat_density must lie in (0, 1], got {}", self.compat_density)));
        }
        for (what, v) in [
            ("token_noise", self.token_noise),
            ("verb_scale", self.verb_scale),
            ("domain_shift.noise_std", self.domain_shift.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(spec_err(format!("{what} must be finite and non-negative, got {v}")));
            }
        }
        if !self.domain_shift.rotation_angle.is_finite() {
            return Err(spec_err("domain_shift.rotation_angle must be finite"));
        }
        if self.background_pool == 0 {
            return Err(spec_err("background_pool must be positive"));
        }
        if let Some(c) = &self.compat {
            if c.len() != self.n_verbs || c.iter().any(|r| r.len() != self.n_nouns) {
                return Err(spec_err("compat must be n_verbs x n_nouns"));
            }
        }
        Ok(())
    }
}

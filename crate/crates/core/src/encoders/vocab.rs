//! Deterministic hash embedding standing in for a pretrained token table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const VOCAB_ROWS: u64 = 4096;
pub const EOS: &str = "<eos>";
pub const CLASS_PLACEHOLDER: &str = "[CLASS]";
const SALT: u64 = 0x5eed_0fe9_7a0c_ab1e;

/// Maps token strings to fixed `d`-dimensional rows. Rows are `N(0, 1/d)` so
/// token vectors have roughly unit norm. The table does not depend on the
/// run seed and is not a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    dim: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Vocabulary {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_index(token: &str) -> u64 {
        fnv1a(token) % VOCAB_ROWS
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        let row = Self::row_index(token);
        let mut rng = ChaCha8Rng::seed_from_u64(SALT ^ row.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let normal = Normal::new(0.0, 1.0 / (self.dim as f64).sqrt()).expect("finite std");
        (0..self.dim).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Lowercased tokens of `text`, split on whitespace and underscores.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| c.is_whitespace() || c == '_')
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    /// Tokens of `template` with the class placeholder replaced by `label`.
    pub fn instantiate(template: &str, label: &str) -> Result<Vec<String>> {
        if !template.contains(CLASS_PLACEHOLDER) {
            return Err(Error::Template(format!(
                "template {template:?} has no {CLASS_PLACEHOLDER} placeholder"
            )));
        }
        let text = template.replace(CLASS_PLACEHOLDER, &format!(" {label} "));
        Ok(Self::tokenize(&text))
    }

    /// Token embeddings of the instantiated template followed by the
    /// end-of-sequence token, shape `[n + 1, d]`.
    pub fn encode_sequence<T: Scalar>(&self, template: &str, label: &str) -> Result<Tensor<T>> {
        let mut tokens = Self::instantiate(template, label)?;
        tokens.push(EOS.to_string());
        let data: Vec<f64> = tokens.iter().flat_map(|t| self.embed(t)).collect();
        Tensor::from_f64(vec![tokens.len(), self.dim], &data)
    }
}

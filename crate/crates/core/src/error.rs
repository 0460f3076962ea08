use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numeric core, the models and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("degenerate input in {op}: {reason}")]
    DegenerateInput { op: &'static str, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("finite-difference probe failed: {0}")]
    Probe(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("template error: {0}")]
    Template(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("benchmark spec error: {0}")]
    Spec(String),

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },

    #[error("training diverged at stage {stage}, step {step}: loss = {loss}")]
    Diverged { stage: u8, step: usize, loss: f64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch in {what}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        what: String,
        stored: u32,
        computed: u32,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

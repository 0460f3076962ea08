//! Component-specific prompt learning with a unified prompt pool for
//! egocentric action recognition, trained in two stages on a synthetic
//! benchmark.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); training
//! runs in `f32` and the verification oracles replay it in `f64`. The
//! aliases below fix the scalar for common use.

pub mod component;
pub mod container;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod init;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pool;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ModelState32 = model::ModelState<f32>;
pub type ModelState64 = model::ModelState<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type PromptPool32 = pool::PromptPool<f32>;
pub type PromptPool64 = pool::PromptPool<f64>;

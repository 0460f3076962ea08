//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, numeric_gradient, reverse_gradient, GradCheckOptions, GradCheckReport, LeafReport, Objective,
};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;


//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Models are trained in `f32`; the finite-difference oracle and the
//! retrieval oracle re-run the same generic code paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable as tensor storage.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Short type name, used in reports.
    const NAME: &'static str;

    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self;

    /// Widening conversion to `f64`.
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

/// Converts a slice between scalar types through `f64`.
pub fn cast_slice<A: Scalar, B: Scalar>(src: &[A]) -> Vec<B> {
    src.iter().map(|&v| B::of(v.widen())).collect()
}

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point element type for every tensor in this crate.
///
/// Implemented for `f32` and `f64`. The bound set is what the tape, the
/// matmul-backed layers and the metrics jointly need; downstream code should
/// depend on this trait rather than a concrete float.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for schedule constants and RNG draws.
    fn from_f64_lossy(v: f64) -> Self;

    /// Widening conversion to `f64`, for reporting and cross-type checks.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Shorthand for `S::from_f64_lossy`, used all over the numeric code.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}

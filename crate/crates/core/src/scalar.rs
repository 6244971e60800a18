//! Floating-point element type shared by tensors, layers and losses.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point: f32 or f64.
///
/// Training runs in `f32`; gradient checks and metric oracles use `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless widening used by the checkpoint archive.
    fn to_f64_exact(self) -> f64;
    fn from_f64_exact(v: f64) -> Self;

    /// Lossy conversion from an f64 literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(v).expect("representable count")
    }

    fn dtype_name() -> &'static str;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64_exact(v: f64) -> Self {
        v as f32
    }
    fn dtype_name() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64_exact(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64_exact(v: f64) -> Self {
        v
    }
    fn dtype_name() -> &'static str {
        "f64"
    }
}

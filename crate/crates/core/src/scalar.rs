//! Scalar abstraction shared by the geometric and network code.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + ScalarOperand
    + LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for literals and configuration values.
    fn c(x: f64) -> Self {
        Self::from(x).expect("f64 literal representable in scalar type")
    }

    /// Lossy conversion to `f64`, for logging and metric aggregation.
    fn to_f64(self) -> f64 {
        NumCast::from(self).expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

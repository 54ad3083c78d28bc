//! Scalar abstraction: the numeric kernels are generic over the float type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by every numeric kernel in this crate.
///
/// Implemented for `f32` and `f64`. Training code instantiates with `f64`
/// (see the crate-root aliases); `f32` is available for storage and
/// experimentation.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for constants and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Lossy conversion to `f64`, for metrics and serialization.
    fn to_f64_lossy(self) -> f64;

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

//! Floating-point scalar abstraction shared by every kernel in the crate.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar type the solvers are generic over.
///
/// Everything numeric goes through nalgebra's `RealField` so the same code
/// runs in `f32` and `f64`. Conversions to and from `f64` are used for
/// literals, random sampling and reporting.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Machine epsilon of the type.
    const EPS: f64;

    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("representable count")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.to_f64_lossy().is_finite()
    }
}

impl Scalar for f32 {
    const EPS: f64 = f32::EPSILON as f64;
}

impl Scalar for f64 {
    const EPS: f64 = f64::EPSILON;
}

//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Special functions (normal CDF and quantile) and random variates are
/// evaluated in `f64` and converted back, so `f32` instantiations trade
/// accuracy in those routines for storage only.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for the two supported types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance floor below which the type cannot resolve differences.
    fn resolution() -> Self;
}

impl Real for f32 {
    fn resolution() -> Self {
        1e-6
    }
}

impl Real for f64 {
    fn resolution() -> Self {
        1e-13
    }
}

/// `max(x, 0)`.
#[inline]
pub fn pos<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

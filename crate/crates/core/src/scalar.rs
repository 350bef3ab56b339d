use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar used throughout the crate (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant, rounding to the nearest representable value.
    fn lit(x: f64) -> Self;

    fn to_f64_lossless(self) -> f64;

    /// Relative tolerance floor: `max(requested, 10 * epsilon)`.
    fn tol(requested: f64) -> Self {
        Self::lit(requested).max(Self::epsilon() * Self::lit(10.0))
    }
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
}

/// Round half to even.
#[inline]
pub fn round_half_even<T: Real>(x: T) -> T {
    let r = x.round();
    if (r - x).abs() == T::lit(0.5) {
        // `round` breaks ties away from zero; pull back to the even neighbour.
        let half = r / T::lit(2.0);
        if half.floor() != half {
            return r - x.signum();
        }
    }
    r
}

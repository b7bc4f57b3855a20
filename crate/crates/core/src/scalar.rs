//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the solver can run on: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Requested tolerance clamped to what the type can resolve.
    #[inline]
    fn tol(requested: f64) -> Self {
        let floor = 64.0 * Self::epsilon().as_f64();
        Self::lit(requested.max(floor))
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Wraps an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle<T: Real>(phi: T) -> T {
    let two_pi = T::TAU();
    let mut r = phi % two_pi;
    if r < T::zero() {
        r += two_pi;
    }
    if r >= two_pi {
        r -= two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_is_in_range() {
        for &x in &[-7.0f64, -0.1, 0.0, 3.0, 6.3, 100.0] {
            let w = wrap_angle(x);
            assert!((0.0..std::f64::consts::TAU).contains(&w));
            assert!(((w - x) / std::f64::consts::TAU).fract().abs() < 1e-12 || ((w - x) / std::f64::consts::TAU).fract().abs() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn tolerance_floor_tracks_epsilon() {
        assert_eq!(<f64 as Real>::tol(1e-10), 1e-10);
        assert!(<f32 as Real>::tol(1e-10) > 1e-6);
    }
}

//! Scalar abstraction for the plaintext (real-valued) side of the engine.
//!
//! Everything that works with real numbers (plaintext tensors, models, ensemble
//! weights, rewards) is generic over [`Real`]. The secure side works in the ring
//! `Z_{2^64}` and only touches `Real` at the encode/decode boundary.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the plaintext side of the engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-as-possible conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is always convertible to a float type")
    }

    /// Conversion to `f64`.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float is always convertible to f64")
    }

    /// Conversion from a count/index.
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean<T: Real>(xs: &[T]) -> T {
        xs.iter().copied().sum::<T>() / T::of_usize(xs.len())
    }

    #[test]
    fn generic_helpers_work_for_both_widths() {
        assert_eq!(mean(&[1.0f64, 2.0, 3.0]), 2.0);
        assert_eq!(mean(&[1.0f32, 2.0, 3.0]), 2.0);
        assert_eq!(<f32 as Real>::of(0.5).as_f64(), 0.5);
    }
}

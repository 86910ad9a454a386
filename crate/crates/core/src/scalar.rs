//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real field the engine computes in. Implemented for `f32` and `f64`.
pub trait Scalar:
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
    + FromStr
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only if the literal is not representable at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize not representable in scalar type")
    }

    #[inline]
    fn from_i64_lossy(n: i64) -> Self {
        Self::from_i64(n).expect("i64 not representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Draws a uniform variate on the open interval (0, 1).
    #[inline]
    fn open_unit<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        // 53 random bits shifted to the centre of their cell so neither endpoint is hit.
        let bits = rng.next_u64() >> 11;
        let u = Self::lit((bits as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0));
        if u >= Self::one() {
            Self::one() - Self::epsilon()
        } else {
            u
        }
    }

    /// Smallest positive value treated as non-degenerate by the series code.
    fn tiny() -> Self {
        Self::min_positive_value() * Self::lit(1e4)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

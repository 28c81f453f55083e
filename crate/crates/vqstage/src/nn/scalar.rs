//! Element type abstraction so the same graph code runs in f32 and f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + Copy
    + Debug
    + Display
    + 'static
{
    fn from_f64_c(x: f64) -> Self;
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_c(x: f64) -> Self {
        x as f32
    }
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_c(x: f64) -> Self {
        x
    }
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals into the active element type.
#[inline(always)]
pub fn fs<T: Scalar>(x: f64) -> T {
    T::from_f64_c(x)
}

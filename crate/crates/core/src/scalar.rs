//! Floating-point scalar abstraction shared by the embedding, retrieval and
//! projection code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::float::TotalOrder;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used for vectors and scores (`f32` or `f64`).
pub trait Scalar:
    Float
    + TotalOrder
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Tolerance used for norm and orthogonality checks at this precision.
    fn unit_tolerance() -> Self;

    /// Lossless-enough conversion from an `f64` literal.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn unit_tolerance() -> Self {
        1e-9
    }
}

impl Scalar for f32 {
    fn unit_tolerance() -> Self {
        1e-5
    }
}

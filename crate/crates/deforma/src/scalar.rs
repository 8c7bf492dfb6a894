//! Scalar abstraction: all core math is generic over the working float type.
//!
//! Test mode runs everything in `f64`; `f32` is available for speed runs.

use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the engine computes with: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + Debug + Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Lift an `f64` literal into the working scalar type.
#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("literal must be representable")
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        let e = (-x).exp();
        T::one() / (T::one() + e)
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softplus, ln(1 + e^x).
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    let hi: T = real(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}

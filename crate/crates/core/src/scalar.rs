//! Scalar abstraction: every numeric stage of the engine is generic over the
//! float width. End-to-end runs use the `f64` aliases at the crate root.

use std::fmt;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar the engine computes with (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` constant. Panics only if the target type has
    /// no representation at all, which never happens for the finite constants
    /// used in this crate.
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 constant not representable")
    }

    /// One standard-normal draw from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

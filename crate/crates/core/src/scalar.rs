//! Engine precision: every run is monomorphized over one float width.
//!
//! Verification paths (gradient checking) force `f64`; throughput runs use
//! `f32`. Byte accounting uses `Scalar::BYTES` so retained-activation counts
//! are exact for either width.

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Float width the engine runs at. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float
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
    /// Bytes per element, used by the retention accounting.
    const BYTES: u64;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }

    /// One draw from N(0, 1) at this precision.
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const BYTES: u64 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    const BYTES: u64 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

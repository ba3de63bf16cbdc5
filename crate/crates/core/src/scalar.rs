//! Floating-point abstraction shared by scoring and metric code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};

/// Real scalar used for BM25 scores, averaged similarity vectors and metrics.
///
/// Implemented for `f32` and `f64`. Everything that accumulates scores is
/// generic over this trait; the crate root exports `f64` aliases for the
/// common case.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from a count.
    fn from_count(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("count representable as float")
    }

    /// Conversion from an `f64` literal or configuration value.
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 representable as scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Mathematical ceiling of `fraction * n` that ignores float noise such as
/// `0.7 * 200 = 140.00000000000003`.
pub fn ceil_count<S: Scalar>(fraction: S, n: usize) -> usize {
    let raw = fraction.to_f64_lossy() * n as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * (1.0 + raw.abs()) {
        nearest
    } else {
        raw.ceil()
    };
    (count.max(0.0) as usize).min(n)
}

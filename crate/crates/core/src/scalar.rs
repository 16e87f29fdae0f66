//! Scalar abstraction shared by every signal-processing stage.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Floating-point sample type: `f32` or `f64`.
pub trait Scalar:
    FftNum + Float + FloatConst + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum
{
    /// Lossless-or-rounded conversion from `f64`.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for i in 0..8 {
            acc[i] = acc[i] + pa[i] * pb[i];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn all_finite<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

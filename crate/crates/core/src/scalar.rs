//! Element types the numeric kernels are generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::model_ir::DType;

/// floating point element: f32 or f64
pub trait Scalar:
    Float
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
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
}

/// Converts a slice between element types.
pub fn cast_slice<A: Scalar, B: Scalar>(src: &[A]) -> Vec<B> {
    src.iter().map(|v| B::from_f64_lossy(v.to_f64_lossy())).collect()
}

/// Norm-wise relative error: `max |a - b| / max |b|`, with `b` the reference.
///
/// Elements near zero are judged against the scale of the whole tensor rather
/// than their own magnitude.
pub fn max_rel_error<A: Scalar, B: Scalar>(actual: &[A], reference: &[B]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "length mismatch");
    let mut scale = 0.0f64;
    let mut diff = 0.0f64;
    for (a, r) in actual.iter().zip(reference) {
        let (a, r) = (a.to_f64_lossy(), r.to_f64_lossy());
        if a.is_nan() != r.is_nan() {
            return f64::INFINITY;
        }
        scale = scale.max(r.abs());
        diff = diff.max((a - r).abs());
    }
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

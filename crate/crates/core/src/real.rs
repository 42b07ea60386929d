use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type the rasterizer and its backward pass are generic over.
///
/// Projection, losses and the optimizer always run in `f64`; only the
/// per-fragment work (compositing, traces, ray gradients) switches precision.
pub trait Real:
    Float + Debug + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn c(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

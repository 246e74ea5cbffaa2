use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point element type accepted by the tensor engine and every
/// network built on it.
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Scalar: NdFloat + FromPrimitive + Default {
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn from_f32_exact(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

/// Shorthand for literal constants in generic code.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

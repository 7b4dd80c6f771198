//! Scalar abstraction so the numeric kernels work in `f32` or `f64`.

use num_traits::Float;
use std::fmt::{Debug, Display};

/// Floating-point scalar used throughout the geometry and tensor kernels.
///
/// The crate-level [`crate::Real`] alias picks the concrete type used by
/// training and the file formats; the generic bound keeps the math reusable
/// at other precisions.
pub trait Scalar:
    Float + Debug + Display + Default + Copy + Send + Sync + 'static
{
    /// Conversion from an `f64` constant (lossy for `f32`).
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

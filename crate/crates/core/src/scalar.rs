use nalgebra::{DMatrix, DVector, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type for the linear-algebra side of the crate.
///
/// Anything nalgebra can decompose and that converts losslessly enough to and
/// from `f64` qualifies; in practice this is `f32` and `f64`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts into every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Real converts into f64")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl<T> Real for T where T: RealField + Copy + FromPrimitive + ToPrimitive {}

#[inline]
pub fn norm_sq<T: Real>(v: &DVector<T>) -> T {
    v.dot(v)
}

/// Converts an `f64` vector to any scalar.
pub fn vector_from_f64<T: Real>(v: &DVector<f64>) -> DVector<T> {
    v.map(T::of)
}

pub fn matrix_from_f64<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::of)
}

pub fn vector_to_f64<T: Real>(v: &DVector<T>) -> DVector<f64> {
    v.map(|x| x.as_f64())
}

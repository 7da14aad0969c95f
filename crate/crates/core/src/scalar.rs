//! Scalar abstraction shared by the geometry, material and regression code.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use nalgebra::{Matrix3, Vector3};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the light-weight modules are generic over (`f32`, `f64`).
///
/// Sparse factorizations and dense spectral work are done in `f64` only.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + nalgebra::Scalar
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Display
    + LowerExp
    + Send
    + Sync
    + Debug
{
    /// Converts an `f64` literal. Panics only for non-representable values,
    /// which cannot happen for `f32`/`f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn norm<T: Real>(v: &Vector3<T>) -> T {
    v.dot(v).sqrt()
}

#[inline]
pub fn distance<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    norm(&(a - b))
}

/// Frobenius norm `|A| = (A·A)^{1/2}`.
#[inline]
pub fn frobenius<T: Real>(a: &Matrix3<T>) -> T {
    contract(a, a).sqrt()
}

/// Double contraction `A·B = Σ A_ij B_ij`.
#[inline]
pub fn contract<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

pub fn normalized<T: Real>(v: &Vector3<T>) -> Vector3<T> {
    let n = norm(v);
    v.map(|c| c / n)
}

pub fn cast_vec<T: Real>(v: &Vector3<f64>) -> Vector3<T> {
    v.map(T::lit)
}

pub fn to_f64_vec<T: Real>(v: &Vector3<T>) -> Vector3<f64> {
    v.map(|c| c.to_f64_lossy())
}

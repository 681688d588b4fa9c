//! Floating-point abstraction shared by the closed-form kernels.

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Real scalar used by the geometry and propulsion kernels: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Debug + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot
    /// represent at all, which never happens for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn two() -> Self {
        Self::one() + Self::one()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Two-component horizontal position or velocity.
pub type Vec2<T> = [T; 2];

#[inline]
pub fn sub2<T: Scalar>(a: Vec2<T>, b: Vec2<T>) -> Vec2<T> {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot2<T: Scalar>(a: Vec2<T>, b: Vec2<T>) -> T {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm2_sq<T: Scalar>(a: Vec2<T>) -> T {
    dot2(a, a)
}

#[inline]
pub fn norm2<T: Scalar>(a: Vec2<T>) -> T {
    a[0].hypot(a[1])
}

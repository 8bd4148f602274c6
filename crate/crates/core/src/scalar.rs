//! Scalar abstraction over the working precision.
//!
//! The renderer and fitting loop run at either f32 or f64. Parameters are
//! stored at the working precision; compositing and gradient reductions
//! always accumulate in f64 regardless (see `splat`).

use nalgebra::RealField;

pub trait Scalar: RealField + Copy + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Short name used in reports ("f32" / "f64").
    const NAME: &'static str;
}

/// The working-precision value of `x`. Free function because the trait
/// method collides with `num_traits::FromPrimitive::from_f64`, which
/// `RealField` pulls into scope.
#[inline(always)]
pub fn sf<S: Scalar>(x: f64) -> S {
    <S as Scalar>::from_f64(x)
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

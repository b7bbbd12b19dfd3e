//! Scalar abstraction shared by the numerical modules.
//!
//! Everything that does floating point math is generic over [`Real`], which
//! is implemented for `f32` and `f64`. Parameter blocks stay in `f64` and are
//! converted at the boundary with [`Real::lit`].

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the estimators: `f32` or `f64`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Finite-difference step suited to the type's precision.
    #[inline]
    fn fd_step() -> Self {
        let cbrt_eps = Self::default_epsilon().cbrt();
        let floor = Self::lit(1e-5);
        if cbrt_eps > floor {
            cbrt_eps
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Microseconds to seconds.
#[inline]
pub fn us_to_s<T: Real>(dt_us: i64) -> T {
    T::lit(dt_us as f64 * 1e-6)
}

//! Scalar abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar accepted by the spline, GLM, conditional-logistic
/// and DLNM code. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Two-sided standard-normal p-value for a Wald statistic.
pub fn two_sided_normal_p<T: Real>(z: T) -> T {
    let z = z.as_f64().abs();
    if z.is_nan() {
        return T::nan();
    }
    T::lit(libm::erfc(z / std::f64::consts::SQRT_2))
}

/// Critical value used for every 95% interval in the crate.
pub const Z95: f64 = 1.96;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_p_reference_points() {
        assert!((two_sided_normal_p(1.96f64) - 0.049_995_790_296_440_87).abs() < 1e-12);
        assert_eq!(two_sided_normal_p(0.0f64), 1.0);
        assert!((two_sided_normal_p(2.0f64) - 0.045_500_263_896_358_39).abs() < 1e-12);
        assert!(two_sided_normal_p(f64::NAN).is_nan());
        assert!((two_sided_normal_p(-1.0f32) - 0.317_310_5).abs() < 1e-6);
    }
}

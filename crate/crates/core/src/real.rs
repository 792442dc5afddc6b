//! Scalar abstraction: all model math is generic over [`Real`], which is
//! implemented for `f32` and `f64`. Concrete type aliases live at the
//! crate root.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the model.
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Send
    + Sync
    + Display
    + Debug
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar not representable as f64")
    }

    /// Numerically stable log(1 + e^x).
    fn softplus(self) -> Self {
        if self > Self::zero() {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    /// Logistic function 1 / (1 + e^{-x}).
    fn logistic(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// Terminal activation of the integral network: sigma(x) = 1 / (1 + e^x),
    /// monotone decreasing in x.
    fn sigma_dec(self) -> Self {
        (-self).logistic()
    }
}

impl<T> Real for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ScalarOperand
        + LinalgScalar
        + Sum
        + Send
        + Sync
        + Display
        + Debug
        + 'static
{
}

/// Inverse of softplus: x such that softplus(x) = y, y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive() {
        for &x in &[-50.0f64, -3.0, 0.0, 1.5, 20.0, 80.0] {
            let naive = if x < 30.0 { (1.0 + x.exp()).ln() } else { x };
            assert!((x.softplus() - naive).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn softplus_inv_roundtrip() {
        for &y in &[1e-6f64, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus_inv(y).softplus() - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn sigma_dec_is_decreasing_and_bounded() {
        assert!((0.5f64.sigma_dec() - 1.0 / (1.0 + 0.5f64.exp())).abs() < 1e-15);
        assert!(10.0f64.sigma_dec() < (-10.0f64).sigma_dec());
        assert!((700.0f64).sigma_dec() >= 0.0);
        assert!((-700.0f64).sigma_dec() <= 1.0);
    }
}

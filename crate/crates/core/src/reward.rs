//! Non-increasing per-job reward `f(T)` of the sojourn time.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Any non-negative, non-increasing reward with a derivative.
///
/// The general optimality check accepts any implementor; the two shipped
/// families are [`RewardSpec`] variants.
pub trait RewardFn<T: Real>: Sync {
    fn eval(&self, t: T) -> T;
    fn deriv(&self, t: T) -> T;

    /// `Some(κ)` when `f(t) = exp(−κt)`, enabling factorised closed forms.
    fn exponential_rate(&self) -> Option<T> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardSpec<T> {
    /// `exp(−κ t)`.
    Exponential { kappa: T },
    /// `(t + 1)^(−γ)`.
    Polynomial { gamma: T },
}

impl<T: Real> RewardSpec<T> {
    pub fn exponential(kappa: T) -> Result<Self> {
        if kappa.is_finite() && kappa > T::zero() {
            Ok(RewardSpec::Exponential { kappa })
        } else {
            Err(Error::invalid("kappa", format!("must be finite and > 0, got {kappa}")))
        }
    }

    pub fn polynomial(gamma: T) -> Result<Self> {
        if gamma.is_finite() && gamma > T::zero() {
            Ok(RewardSpec::Polynomial { gamma })
        } else {
            Err(Error::invalid("gamma", format!("must be finite and > 0, got {gamma}")))
        }
    }
}

impl<T: Real> RewardFn<T> for RewardSpec<T> {
    fn eval(&self, t: T) -> T {
        match *self {
            RewardSpec::Exponential { kappa } => (-kappa * t).exp(),
            RewardSpec::Polynomial { gamma } => (t + T::one()).powf(-gamma),
        }
    }

    fn deriv(&self, t: T) -> T {
        match *self {
            RewardSpec::Exponential { kappa } => -kappa * (-kappa * t).exp(),
            RewardSpec::Polynomial { gamma } => -gamma * (t + T::one()).powf(-gamma - T::one()),
        }
    }

    fn exponential_rate(&self) -> Option<T> {
        match *self {
            RewardSpec::Exponential { kappa } => Some(kappa),
            RewardSpec::Polynomial { .. } => None,
        }
    }
}

impl<T: Real> fmt::Display for RewardSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardSpec::Exponential { kappa } => write!(f, "exp(-{kappa}·T)"),
            RewardSpec::Polynomial { gamma } => write!(f, "(T+1)^-{gamma}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_examples() {
        assert_eq!(RewardSpec::exponential(1.0).unwrap().eval(0.0), 1.0);
        assert_eq!(RewardSpec::polynomial(2.0).unwrap().eval(1.0), 0.25);
        let v = RewardSpec::<f64>::exponential(1.0).unwrap().eval(1.5);
        assert!((v - 0.22313016014842982).abs() < 1e-15);
    }

    #[test]
    fn deriv_examples() {
        assert_eq!(RewardSpec::exponential(1.0).unwrap().deriv(0.0), -1.0);
        assert_eq!(RewardSpec::polynomial(1.0).unwrap().deriv(0.0), -1.0);
        let v = RewardSpec::exponential(2.0).unwrap().deriv(1.0);
        assert!((v + 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((v + 0.2707).abs() < 1e-4);
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        assert!(RewardSpec::exponential(0.0).is_err());
        assert!(RewardSpec::polynomial(-1.0).is_err());
        assert!(RewardSpec::exponential(f64::NAN).is_err());
    }

    #[test]
    fn deriv_matches_central_difference() {
        let h = 1e-5;
        for f in [
            RewardSpec::exponential(0.3).unwrap(),
            RewardSpec::exponential(2.0).unwrap(),
            RewardSpec::polynomial(0.5).unwrap(),
            RewardSpec::polynomial(3.0).unwrap(),
        ] {
            for i in 0..=100 {
                let t = i as f64 * 0.1 + if i == 0 { h } else { 0.0 };
                let fd = (f.eval(t + h) - f.eval(t - h)) / (2.0 * h);
                assert!((fd - f.deriv(t)).abs() < 1e-6, "{f} t={t}");
            }
        }
    }

    fn spec() -> impl Strategy<Value = RewardSpec<f64>> {
        prop_oneof![
            (0.01f64..5.0).prop_map(|k| RewardSpec::Exponential { kappa: k }),
            (0.01f64..5.0).prop_map(|g| RewardSpec::Polynomial { gamma: g }),
        ]
    }

    proptest! {
        #[test]
        fn bounded_decreasing_convex(f in spec(), t in 0.0f64..20.0, dt in 1e-3f64..5.0) {
            let (a, b) = (f.eval(t), f.eval(t + dt));
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!(b < a);
            prop_assert!(f.deriv(t) <= 0.0);
            prop_assert!(f.deriv(t + dt).abs() <= f.deriv(t).abs());
        }
    }
}

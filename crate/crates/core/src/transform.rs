//! Yeo–Johnson power transformations on the whole real line.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

const BRANCH_EPS: f64 = 1e-12;

/// Transformation exponent, restricted to [0, 2].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Theta(f64);

impl Theta {
    pub const MIN: f64 = 0.0;
    pub const MAX: f64 = 2.0;
    pub const IDENTITY: Theta = Theta(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&value) {
            return domain(format!("theta {value} outside [0, 2]"));
        }
        Ok(Theta(value))
    }

    /// Clamps into [0, 2]; NaN maps to the identity.
    pub fn clamped(value: f64) -> Self {
        if value.is_nan() {
            return Self::IDENTITY;
        }
        Theta(value.clamp(Self::MIN, Self::MAX))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Theta {
    type Error = crate::Error;
    fn try_from(v: f64) -> Result<Self> {
        Theta::new(v)
    }
}

impl From<Theta> for f64 {
    fn from(t: Theta) -> f64 {
        t.0
    }
}

/// Λ_θ(t). Unchecked: `theta` is trusted to lie in [0, 2].
#[inline]
pub fn yj(theta: f64, t: f64) -> f64 {
    if t >= 0.0 {
        if theta.abs() < BRANCH_EPS {
            t.ln_1p()
        } else {
            // ((t+1)^θ - 1)/θ = expm1(θ log1p(t))/θ keeps precision near θ = 0.
            (theta * t.ln_1p()).exp_m1() / theta
        }
    } else {
        let p = 2.0 - theta;
        if p.abs() < BRANCH_EPS {
            -(-t).ln_1p()
        } else {
            -(p * (-t).ln_1p()).exp_m1() / p
        }
    }
}

/// log Λ'_θ(t).
#[inline]
pub fn yj_log_deriv(theta: f64, t: f64) -> f64 {
    if t >= 0.0 {
        (theta - 1.0) * t.ln_1p()
    } else {
        (1.0 - theta) * (-t).ln_1p()
    }
}

#[inline]
pub fn yj_deriv(theta: f64, t: f64) -> f64 {
    yj_log_deriv(theta, t).exp()
}

/// Λ_θ^{-1}(s).
#[inline]
pub fn yj_inv(theta: f64, s: f64) -> f64 {
    if s >= 0.0 {
        if theta.abs() < BRANCH_EPS {
            s.exp_m1()
        } else {
            // t = (1 + θ s)^{1/θ} - 1
            ((theta * s).ln_1p() / theta).exp_m1()
        }
    } else {
        let p = 2.0 - theta;
        if p.abs() < BRANCH_EPS {
            -(-s).exp_m1()
        } else {
            -((-p * s).ln_1p() / p).exp_m1()
        }
    }
}

fn check(theta: Theta, x: f64, what: &str) -> Result<()> {
    if !x.is_finite() {
        return domain(format!("{what} must be finite, got {x}"));
    }
    debug_assert!((0.0..=2.0).contains(&theta.0));
    Ok(())
}

pub fn yeo_johnson(theta: Theta, t: f64) -> Result<f64> {
    check(theta, t, "t")?;
    Ok(yj(theta.0, t))
}

pub fn yeo_johnson_deriv(theta: Theta, t: f64) -> Result<f64> {
    check(theta, t, "t")?;
    Ok(yj_deriv(theta.0, t))
}

/// Inverse transform. For θ in [0, 2] the map is onto ℝ, so every finite
/// `s` has a preimage; an infinite result means the preimage overflows f64.
pub fn yeo_johnson_inverse(theta: Theta, s: f64) -> Result<f64> {
    check(theta, s, "s")?;
    Ok(yj_inv(theta.0, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn th(v: f64) -> Theta {
        Theta::new(v).unwrap()
    }

    #[test]
    fn documented_values() {
        assert_eq!(yeo_johnson(th(1.0), -3.7).unwrap(), -3.7);
        assert!((yeo_johnson(th(0.0), 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((yeo_johnson(th(0.5), 3.0).unwrap() - 2.0).abs() < 1e-14);
        assert!((yeo_johnson(th(2.0), -1.0).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert!((yeo_johnson_deriv(th(1.0), 5.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((yeo_johnson_deriv(th(0.5), 3.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((yeo_johnson_inverse(th(1.0), 4.2).unwrap() - 4.2).abs() < 1e-14);
        assert!((yeo_johnson_inverse(th(0.5), 2.0).unwrap() - 3.0).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Theta::new(-0.1).is_err());
        assert!(Theta::new(2.01).is_err());
        assert!(yeo_johnson(th(1.0), f64::NAN).is_err());
        assert!(yeo_johnson(th(1.0), f64::INFINITY).is_err());
        assert!(yeo_johnson_inverse(th(1.0), f64::NEG_INFINITY).is_err());
        assert!(serde_json::from_str::<Theta>("2.5").is_err());
    }

    #[test]
    fn continuous_in_theta_at_log_branches() {
        for &t in &[-50.0, -2.0, -0.3, 0.0, 0.4, 3.0, 80.0] {
            for &(a, b) in &[(0.0, 1e-8), (2.0, 2.0 - 1e-8)] {
                let d = (yj(a, t) - yj(b, t)).abs();
                assert!(d < 1e-6 * yj(a, t).abs().max(1.0), "theta {a} vs {b} at t={t}: {d}");
            }
        }
    }

    #[test]
    fn grows_without_bound() {
        for i in 0..=20 {
            let theta = i as f64 * 0.1;
            assert!(yj(theta, 1e6) > 10.0);
            assert!(yj(theta, -1e6) < -10.0);
            assert!(yj(theta, 1e12) > yj(theta, 1e6) + 10.0);
        }
    }

    proptest! {
        #[test]
        fn point_symmetry(theta in 0.0f64..=2.0, t in -100.0f64..100.0) {
            let lhs = yj(theta, t);
            let rhs = -yj(2.0 - theta, -t);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn strictly_increasing(theta in 0.0f64..=2.0, t in -50.0f64..50.0, dt in 1e-6f64..10.0) {
            prop_assert!(yj(theta, t) < yj(theta, t + dt));
        }

        #[test]
        fn inverse_round_trip(theta in 0.0f64..=2.0, t in -30.0f64..30.0) {
            let back = yj_inv(theta, yj(theta, t));
            prop_assert!((back - t).abs() <= 1e-10 * (1.0 + t.abs()));
        }
    }
}

//! Canonical-link exponential families
//! f(y | θ) = exp{(yθ − b(θ))/φ + c(y, φ)}.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are kept inside [PROB_CLAMP, 1 − PROB_CLAMP] wherever a
/// logarithm of a fitted binomial mean is taken.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    BinomialLogit,
    GaussianIdentity,
    PoissonLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFamily {
    pub kind: FamilyKind,
    /// Known dispersion φ.
    pub phi: f64,
}

impl ExponentialFamily {
    pub const fn binomial() -> Self {
        Self {
            kind: FamilyKind::BinomialLogit,
            phi: 1.0,
        }
    }

    pub const fn gaussian() -> Self {
        Self {
            kind: FamilyKind::GaussianIdentity,
            phi: 1.0,
        }
    }

    pub fn gaussian_with_dispersion(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidInput(format!("dispersion must be positive, got {phi}")));
        }
        Ok(Self {
            kind: FamilyKind::GaussianIdentity,
            phi,
        })
    }

    pub const fn poisson() -> Self {
        Self {
            kind: FamilyKind::PoissonLog,
            phi: 1.0,
        }
    }

    /// Cumulant function b(θ).
    pub fn b(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::BinomialLogit => softplus(theta),
            FamilyKind::GaussianIdentity => 0.5 * theta * theta,
            FamilyKind::PoissonLog => theta.exp(),
        }
    }

    /// Mean function b′(θ).
    pub fn b_prime(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::BinomialLogit => sigmoid(theta),
            FamilyKind::GaussianIdentity => theta,
            FamilyKind::PoissonLog => theta.exp(),
        }
    }

    /// Variance function b″(θ).
    pub fn b_double_prime(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::BinomialLogit => {
                let p = sigmoid(theta);
                p * (1.0 - p)
            }
            FamilyKind::GaussianIdentity => 1.0,
            FamilyKind::PoissonLog => theta.exp(),
        }
    }

    /// Canonical parameter of a mean, the inverse of b′.
    pub fn theta_of_mean(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::BinomialLogit => (mu / (1.0 - mu)).ln(),
            FamilyKind::GaussianIdentity => mu,
            FamilyKind::PoissonLog => mu.ln(),
        }
    }

    /// Clamps θ so that a binomial mean stays within [PROB_CLAMP, 1 − PROB_CLAMP].
    /// Other families pass through. Returns the value and whether it was clamped.
    pub fn clamp_theta(&self, theta: f64) -> (f64, bool) {
        match self.kind {
            FamilyKind::BinomialLogit => {
                let bound = theta_clamp_bound();
                if theta > bound {
                    (bound, true)
                } else if theta < -bound {
                    (-bound, true)
                } else {
                    (theta, false)
                }
            }
            _ => (theta, false),
        }
    }

    pub fn validate_response(&self, y: &DVector<f64>) -> Result<()> {
        match self.kind {
            FamilyKind::BinomialLogit => {
                if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "binomial response must be 0 or 1, found {v}"
                    )));
                }
            }
            FamilyKind::PoissonLog => {
                if let Some(v) = y.iter().find(|&&v| v < 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "poisson response must be non-negative, found {v}"
                    )));
                }
            }
            FamilyKind::GaussianIdentity => {}
        }
        Ok(())
    }
}

pub(crate) fn theta_clamp_bound() -> f64 {
    ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln()
}

impl fmt::Display for ExponentialFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            FamilyKind::BinomialLogit => "binomial",
            FamilyKind::GaussianIdentity => "gaussian",
            FamilyKind::PoissonLog => "poisson",
        };
        f.write_str(name)
    }
}

impl FromStr for ExponentialFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binomial" | "binomial-logit" | "logistic" => Ok(Self::binomial()),
            "gaussian" | "gaussian-identity" | "normal" => Ok(Self::gaussian()),
            "poisson" | "poisson-log" => Ok(Self::poisson()),
            other => Err(Error::InvalidInput(format!("unknown family '{other}'"))),
        }
    }
}

/// log(1 + e^θ) without overflow.
pub fn softplus(theta: f64) -> f64 {
    if theta > 0.0 {
        theta + (-theta).exp().ln_1p()
    } else {
        theta.exp().ln_1p()
    }
}

pub fn sigmoid(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

/// Σ_i [y_i θ_i − b(θ_i)]/φ. The c(y, φ) term does not depend on θ and is
/// omitted, so values differ from the full log-density by a constant.
pub fn loglik(family: &ExponentialFamily, theta: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if theta.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "theta has length {}, y has length {}",
            theta.len(),
            y.len()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("linear predictor"));
    }
    let s: f64 = theta.iter().zip(y.iter()).map(|(&t, &yi)| yi * t - family.b(t)).sum();
    Ok(s / family.phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const FAMILIES: [ExponentialFamily; 3] = [
        ExponentialFamily::binomial(),
        ExponentialFamily::gaussian(),
        ExponentialFamily::poisson(),
    ];

    #[test]
    fn derivatives_match_finite_differences() {
        for fam in FAMILIES {
            for i in -40..=40 {
                let t = i as f64 * 0.1;
                let h = 1e-5;
                let db = (fam.b(t + h) - fam.b(t - h)) / (2.0 * h);
                let d2b = (fam.b_prime(t + h) - fam.b_prime(t - h)) / (2.0 * h);
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-8);
                assert!(rel(db, fam.b_prime(t)) <= 1e-6, "{fam} b' at {t}");
                assert!(rel(d2b, fam.b_double_prime(t)) <= 1e-6, "{fam} b'' at {t}");
                assert!(fam.b_double_prime(t) >= 0.0);
            }
        }
    }

    #[test]
    fn binomial_is_log1p_exp() {
        let f = ExponentialFamily::binomial();
        assert_eq!(f.phi, 1.0);
        for t in [-30.0, -2.0, 0.0, 0.7, 30.0, 800.0] {
            let direct: f64 = if t < 700.0 { (1.0 + f64::exp(t)).ln() } else { t };
            assert_abs_diff_eq!(f.b(t), direct, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(f.b(0.0), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn loglik_examples() {
        let f = ExponentialFamily::binomial();
        let one = DVector::from_vec(vec![0.0]);
        let y = DVector::from_vec(vec![1.0]);
        assert_abs_diff_eq!(loglik(&f, &one, &y).unwrap(), -(2f64.ln()), epsilon = 1e-15);
        let th = DVector::from_vec(vec![0.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        assert_abs_diff_eq!(loglik(&f, &th, &y).unwrap(), -2.0 * 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn loglik_matches_bernoulli_density() {
        let f = ExponentialFamily::binomial();
        let th = DVector::from_vec(vec![-1.3_f64, 0.2, 2.5, 0.9]);
        let y = DVector::from_vec(vec![0.0_f64, 1.0, 1.0, 0.0]);
        let oracle: f64 = th
            .iter()
            .zip(y.iter())
            .map(|(&t, &yi): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-t).exp());
                if yi == 1.0 {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum();
        assert_abs_diff_eq!(loglik(&f, &th, &y).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn loglik_rejects_non_finite() {
        let f = ExponentialFamily::gaussian();
        let th = DVector::from_vec(vec![f64::INFINITY]);
        let y = DVector::from_vec(vec![1.0]);
        assert!(matches!(loglik(&f, &th, &y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn clamp_bound_maps_to_prob_clamp() {
        let f = ExponentialFamily::binomial();
        let (t, c) = f.clamp_theta(100.0);
        assert!(c);
        assert_abs_diff_eq!(f.b_prime(t), 1.0 - PROB_CLAMP, epsilon = 1e-15);
        assert_eq!(f.clamp_theta(3.0), (3.0, false));
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            "binomial".parse::<ExponentialFamily>().unwrap(),
            ExponentialFamily::binomial()
        );
        assert_eq!(
            "poisson".parse::<ExponentialFamily>().unwrap().kind,
            FamilyKind::PoissonLog
        );
        assert!("gamma".parse::<ExponentialFamily>().is_err());
    }
}

//! Maximum-likelihood fitting of canonical-link GLMs by iteratively
//! reweighted least squares (Fisher scoring) with step-halving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};
use crate::family::ExponentialFamily;
use crate::linalg::{pivoted_rank, solve_spd};
use crate::patterns::{Pattern, PatternIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Converged when the score max-norm is at or below this.
    pub grad_tol: f64,
    /// Ridge added to the weighted normal equations once the fit diverges.
    pub ridge: f64,
    /// Relative pivot threshold for the rank check.
    pub rank_tol: f64,
    pub max_halvings: usize,
    /// ‖β‖₂ beyond which the separation guard switches on.
    pub divergence_norm: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
            ridge: 1e-8,
            rank_tol: 1e-10,
            max_halvings: 40,
            divergence_norm: 1e4,
        }
    }
}

/// Result of a single GLM fit on a dense design.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta: DVector<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Score max-norm at `beta`.
    pub grad_norm: f64,
    /// The separation guard was triggered and the ridge is active.
    pub separation: bool,
    /// Objective after each accepted iterate, starting at β = 0.
    pub loglik_path: Vec<f64>,
}

/// A fitted candidate model M_k: pattern Δ_k fitted on the subjects S_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub pattern: Pattern,
    #[serde(with = "crate::serde_vec")]
    pub beta: DVector<f64>,
    pub n_k: usize,
    pub p_k: usize,
    /// Maximized log-likelihood on S_k (without c(y, φ)).
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default)]
    pub separation: bool,
}

/// Checks that `x` has full column rank; dependent columns are reported by
/// position in `x`.
pub fn check_rank(x: &DMatrix<f64>, rank_tol: f64) -> std::result::Result<(), Vec<usize>> {
    let report = pivoted_rank(x, rank_tol);
    if report.rank < x.ncols() {
        Err(report.dependent)
    } else {
        Ok(())
    }
}

/// Fits a GLM with design `x` (intercept, if any, is an ordinary column).
pub fn fit_glm(x: &DMatrix<f64>, y: &DVector<f64>, family: &ExponentialFamily, opts: &FitOptions) -> Result<GlmFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows, response {}",
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix"));
    }
    family.validate_response(y)?;

    let phi = family.phi;
    let mut ridge_on = false;
    let objective = |beta: &DVector<f64>, ridge_on: bool| -> f64 {
        let eta = x * beta;
        let ll: f64 = eta
            .iter()
            .zip(y.iter())
            .map(|(&t, &yi)| yi * t - family.b(t))
            .sum::<f64>()
            / phi;
        if ridge_on {
            ll - 0.5 * opts.ridge * beta.norm_squared()
        } else {
            ll
        }
    };
    let score = |beta: &DVector<f64>, ridge_on: bool| -> DVector<f64> {
        let eta = x * beta;
        let resid = DVector::from_iterator(n, eta.iter().zip(y.iter()).map(|(&t, &yi)| yi - family.b_prime(t)));
        let mut g = x.tr_mul(&resid) / phi;
        if ridge_on {
            g -= beta * opts.ridge;
        }
        g
    };

    let mut beta = DVector::zeros(p);
    let mut ll = objective(&beta, false);
    let mut path = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad = score(&beta, false);

    while iterations < opts.max_iter {
        if grad.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        let eta = x * &beta;
        let mut info = DMatrix::zeros(p, p);
        let mut xw = x.clone();
        for (i, &t) in eta.iter().enumerate() {
            let w = family.b_double_prime(t).max(1e-300) / phi;
            xw.row_mut(i).scale_mut(w);
        }
        info.gemm_tr(1.0, x, &xw, 0.0);
        if ridge_on {
            for d in 0..p {
                info[(d, d)] += opts.ridge;
            }
        }
        let delta = match solve_spd(info.clone(), &grad) {
            Some(d) => d,
            None => {
                // weights underflowed (e.g. fitted probabilities at 0/1)
                ridge_on = true;
                for d in 0..p {
                    info[(d, d)] += opts.ridge.max(1e-12);
                }
                ll = objective(&beta, true);
                solve_spd(info, &grad).ok_or(Error::NonFinite("IRLS normal equations"))?
            }
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &beta + &delta * step;
            let ll_c = objective(&cand, ridge_on);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * (1.0 + ll.abs()) {
                accepted = Some((cand, ll_c));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((cand, ll_c)) = accepted else {
            break;
        };
        let stalled = ll_c <= ll && step < 1.0;
        beta = cand;
        ll = ll_c;
        if !ridge_on && beta.norm() > opts.divergence_norm {
            ridge_on = true;
            ll = objective(&beta, true);
        }
        path.push(ll);
        grad = score(&beta, ridge_on);
        if stalled {
            converged = grad.amax() <= opts.grad_tol;
            break;
        }
    }
    if !converged && grad.amax() <= opts.grad_tol {
        converged = true;
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("IRLS coefficients"));
    }
    Ok(GlmFit {
        loglik: objective(&beta, false),
        grad_norm: grad.amax(),
        beta,
        converged,
        iterations,
        separation: ridge_on,
        loglik_path: path,
    })
}

/// Fits candidate model `k` (0-based) on S_k with the covariates of Δ_k.
pub fn fit_candidate(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    k: usize,
    family: &ExponentialFamily,
    opts: &FitOptions,
) -> Result<CandidateModel> {
    let pattern = index.pattern(k).clone();
    let rows = index.s_set(k);
    let (n_k, p_k) = (rows.len(), pattern.len());
    if n_k < p_k {
        return Err(Error::TooFewObservations {
            pattern: pattern.indices.clone(),
            n: n_k,
            p: p_k,
        });
    }
    let x = data.design(rows, &pattern.indices);
    let y = data.response(rows);
    if let Err(dep) = check_rank(&x, opts.rank_tol) {
        return Err(Error::RankDeficient {
            columns: dep.iter().map(|&c| pattern.indices[c]).collect(),
            pattern: pattern.indices,
        });
    }
    let fit = fit_glm(&x, &y, family, opts)?;
    if fit.separation {
        log::warn!(
            "pattern {:?}: coefficients diverged, ridge guard active",
            pattern.indices
        );
    }
    if !fit.converged {
        log::warn!(
            "pattern {:?}: IRLS stopped after {} iterations (score {:.3e})",
            pattern.indices,
            fit.iterations,
            fit.grad_norm
        );
    }
    Ok(CandidateModel {
        pattern,
        beta: fit.beta,
        n_k,
        p_k,
        loglik: fit.loglik,
        converged: fit.converged,
        iterations: fit.iterations,
        separation: fit.separation,
    })
}

impl CandidateModel {
    /// x_k^T β̂_(k) where x_k is the pattern's sub-vector of a dense p-vector.
    pub fn linear_predictor_dense(&self, x_full: &[f64]) -> f64 {
        self.pattern
            .indices
            .iter()
            .zip(self.beta.iter())
            .map(|(&j, &b)| x_full[j] * b)
            .sum()
    }
}

/// x_k^{*T} β̂_(k) with x_k^* = Π_k x_full. Every index of the pattern must be observed.
pub fn linear_predictor(model: &CandidateModel, x_full: &[Option<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for (&j, &b) in model.pattern.indices.iter().zip(model.beta.iter()) {
        let v = x_full
            .get(j)
            .copied()
            .flatten()
            .ok_or(Error::Unobserved { column: j })?;
        s += v * b;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::patterns::build_pattern_index;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_equals_least_squares() {
        let d = fixtures::complete_gaussian(30, 4, 11);
        let x = d.design(&(0..30).collect::<Vec<_>>(), &[0, 1, 2, 3]);
        let y = d.y().clone();
        let fit = fit_glm(&x, &y, &ExponentialFamily::gaussian(), &FitOptions::default()).unwrap();
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        assert!(fit.converged);
        assert!((fit.beta - ols).amax() < 1e-8);
    }

    #[test]
    fn intercept_only_at_mean_gives_zero() {
        let x = DMatrix::from_element(6, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let fit = fit_glm(&x, &y, &ExponentialFamily::binomial(), &FitOptions::default()).unwrap();
        assert_eq!(fit.beta[0], 0.0);
        assert!(fit.converged);
        let y = DVector::from_element(4, 1.0);
        let x = DMatrix::from_element(4, 1, 1.0);
        let fit = fit_glm(&x, &y, &ExponentialFamily::poisson(), &FitOptions::default()).unwrap();
        assert_eq!(fit.beta[0], 0.0);
    }

    #[test]
    fn loglik_path_is_non_decreasing() {
        let (x, y) = fixtures::logistic_problem(80, 3, 2.0, 4);
        let fit = fit_glm(&x, &y, &ExponentialFamily::binomial(), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        for w in fit.loglik_path.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn poisson_fit_converges() {
        let (x, y) = fixtures::poisson_problem(100, 3, 9);
        let fit = fit_glm(&x, &y, &ExponentialFamily::poisson(), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        let mu = (&x * &fit.beta).map(f64::exp);
        let score = x.tr_mul(&(y - mu));
        assert!(score.amax() <= 1e-8);
    }

    #[test]
    fn separated_data_is_flagged_and_bounded() {
        let x = DMatrix::from_row_slice(6, 2, &[1., -3., 1., -2., 1., -1., 1., 1., 1., 2., 1., 3.]);
        let y = DVector::from_vec(vec![0., 0., 0., 1., 1., 1.]);
        let fit = fit_glm(&x, &y, &ExponentialFamily::binomial(), &FitOptions::default()).unwrap();
        // the score vanishes long before the norm guard
        assert!(!fit.separation);
        assert!(fit.beta.iter().all(|b| b.is_finite()));
        let opts = FitOptions {
            divergence_norm: 5.0,
            ..FitOptions::default()
        };
        let guarded = fit_glm(&x, &y, &ExponentialFamily::binomial(), &opts).unwrap();
        assert!(guarded.separation);
        assert!(guarded.beta.iter().all(|b| b.is_finite()));
        assert!(guarded.beta.norm() < 1e3);
    }

    #[test]
    fn rank_deficient_candidate_is_rejected() {
        let rows: Vec<Vec<Option<f64>>> = (0..10)
            .map(|i| vec![Some(1.0), Some(i as f64), Some(2.0 * i as f64)])
            .collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let d = FragmentaryDataset::from_rows(y, &rows, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let idx = build_pattern_index(&d).unwrap();
        let err = fit_candidate(&d, &idx, 0, &ExponentialFamily::gaussian(), &FitOptions::default()).unwrap_err();
        match err {
            Error::RankDeficient { columns, .. } => assert_eq!(columns.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toy_cc_is_underdetermined() {
        let d = fixtures::toy_ten();
        let idx = build_pattern_index(&d).unwrap();
        let err = fit_candidate(&d, &idx, 0, &ExponentialFamily::gaussian(), &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::TooFewObservations { n: 2, p: 8, .. }));
    }

    #[test]
    fn linear_predictor_examples() {
        let m = CandidateModel {
            pattern: Pattern {
                id: 1,
                indices: vec![0, 2],
            },
            beta: DVector::from_vec(vec![1.0, -2.0]),
            n_k: 10,
            p_k: 2,
            loglik: 0.0,
            converged: true,
            iterations: 1,
            separation: false,
        };
        let x = [Some(2.0), Some(9.0), Some(0.5)];
        assert_abs_diff_eq!(linear_predictor(&m, &x).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.linear_predictor_dense(&[2.0, 9.0, 0.5]), 1.0, epsilon = 1e-15);
        let missing = [Some(2.0), Some(9.0), None];
        assert!(matches!(
            linear_predictor(&m, &missing),
            Err(Error::Unobserved { column: 2 })
        ));
        let zero = CandidateModel {
            beta: DVector::zeros(2),
            ..m
        };
        assert_eq!(linear_predictor(&zero, &x).unwrap(), 0.0);
    }
}

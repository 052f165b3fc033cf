//! Comparator methods: complete-case GLM, smoothed AIC/BIC weights,
//! zero-imputation model averaging, and group lasso followed by a refit.
//!
//! Every method, including the averaging estimator itself, ends in a
//! [`BaselineResult`]: an effective coefficient vector over the dataset's
//! columns plus the set of columns a query must supply.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{
    average_candidates, combine, fit_candidates, optimize_weights, AveragedModel, AveragingSettings, CriterionContext,
    LambdaChoice, LambdaMode, Prediction, WeightVector,
};
use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};
use crate::family::{loglik, ExponentialFamily, FamilyKind};
use crate::glm::{check_rank, fit_candidate, fit_glm, CandidateModel, FitOptions};
use crate::patterns::{embed, Pattern, PatternIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Opt1,
    Opt2,
    Cc,
    Saic,
    Sbic,
    Imp1,
    Imp2,
    Glasso,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Opt1,
        Method::Opt2,
        Method::Cc,
        Method::Saic,
        Method::Sbic,
        Method::Imp1,
        Method::Imp2,
        Method::Glasso,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Opt1 => "opt1",
            Method::Opt2 => "opt2",
            Method::Cc => "cc",
            Method::Saic => "saic",
            Method::Sbic => "sbic",
            Method::Imp1 => "imp1",
            Method::Imp2 => "imp2",
            Method::Glasso => "glasso",
        }
    }

    /// Whether the method's output carries simplex weights.
    pub fn has_weights(&self) -> bool {
        !matches!(self, Method::Cc | Method::Glasso)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

/// Parses a comma-separated method list, keeping the given order and dropping
/// repeats. `all` stands for every method.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|s| !s.trim().is_empty()) {
        let ms = if part.trim().eq_ignore_ascii_case("all") {
            Method::ALL.to_vec()
        } else {
            vec![part.parse()?]
        };
        for m in ms {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("empty method list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineMeta {
    /// Patterns of the averaged candidates, in weight order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_patterns: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ic: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glasso_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_groups: Vec<usize>,
    /// Simplex KKT residual of optimized weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kkt_residual: Option<f64>,
    /// Sample size of the final fit or of the weighting sample.
    pub n_fit: usize,
    pub converged: bool,
}

/// A fitted method, reduced to what prediction needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: Method,
    pub family: ExponentialFamily,
    /// Coefficients over all dataset columns; zero where unused.
    #[serde(with = "crate::serde_vec")]
    pub beta_effective: DVector<f64>,
    /// Columns a query must observe (unless `impute_zero`).
    pub support: Vec<usize>,
    /// Unavailable query cells are read as zero.
    pub impute_zero: bool,
    pub weights: Option<WeightVector>,
    pub metadata: BaselineMeta,
}

impl BaselineResult {
    pub fn predict(&self, x_full: &[Option<f64>]) -> Result<Prediction> {
        let mut theta = 0.0;
        for &j in &self.support {
            let v = match x_full.get(j).copied().flatten() {
                Some(v) => v,
                None if self.impute_zero => 0.0,
                None => return Err(Error::Unobserved { column: j }),
            };
            theta += v * self.beta_effective[j];
        }
        Ok(Prediction {
            theta,
            mean: self.family.b_prime(theta),
        })
    }

    /// Linear predictors for `rows` of `data`.
    pub fn linear_predictor(&self, data: &FragmentaryDataset, rows: &[usize]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            out[r] = self.predict(&data.row(i))?.theta;
        }
        Ok(out)
    }

    pub fn from_averaged(method: Method, model: &AveragedModel) -> Self {
        Self {
            method,
            family: model.family,
            beta_effective: model.beta_combined.clone(),
            support: model.weighting_pattern.clone(),
            impute_zero: false,
            weights: Some(model.weights.clone()),
            metadata: BaselineMeta {
                candidate_patterns: model.candidates.iter().map(|c| c.pattern.indices.clone()).collect(),
                lambda_n: Some(model.lambda_n),
                criterion: Some(model.criterion_value),
                kkt_residual: Some(model.diagnostics.kkt_residual),
                n_fit: model.n_1,
                converged: model.diagnostics.converged,
                ..Default::default()
            },
        }
    }
}

/// GLM on the complete cases with every covariate of the first pattern; the
/// same fit as candidate M_1.
pub fn fit_cc(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    family: &ExponentialFamily,
    opts: &FitOptions,
) -> Result<BaselineResult> {
    let m1 = fit_candidate(data, index, 0, family, opts)?;
    Ok(cc_from_candidate(&m1, family, data.p()))
}

fn cc_from_candidate(m1: &CandidateModel, family: &ExponentialFamily, p: usize) -> BaselineResult {
    BaselineResult {
        method: Method::Cc,
        family: *family,
        beta_effective: embed(&m1.pattern.indices, &m1.beta, p),
        support: m1.pattern.indices.clone(),
        impute_zero: false,
        weights: None,
        metadata: BaselineMeta {
            candidate_patterns: vec![m1.pattern.indices.clone()],
            n_fit: m1.n_k,
            converged: m1.converged,
            ..Default::default()
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcFlavor {
    Aic,
    Bic,
}

/// Sample on which candidate log-likelihoods enter the information criterion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcSample {
    /// Each candidate's own fitting sample S_k. Larger samples carry larger
    /// −2ℓ, so the weights lean toward small-sample models such as M_1.
    #[default]
    OwnSample,
    /// The common complete-case sample S_1.
    CompleteCases,
}

/// w_k ∝ exp(−IC_k / 2), shifted by the minimum IC before exponentiating.
pub fn smoothed_ic_weights(ic: &[f64]) -> Result<WeightVector> {
    let min = ic
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::NonFinite("information criteria"));
    }
    let w: Vec<f64> = ic
        .iter()
        .map(|&v| if v.is_finite() { (-(v - min) / 2.0).exp() } else { 0.0 })
        .collect();
    WeightVector::new(DVector::from_vec(w))
}

/// Smoothed AIC (penalty 2) or BIC (penalty log n_1) weights over the candidates.
pub fn fit_smoothed_ic(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    candidates: &[CandidateModel],
    family: &ExponentialFamily,
    flavor: IcFlavor,
    sample: IcSample,
) -> Result<BaselineResult> {
    let base = &index.pattern(0).indices;
    let rows = index.s_set(0);
    let n_1 = rows.len();
    let pen = match flavor {
        IcFlavor::Aic => 2.0,
        IcFlavor::Bic => (n_1 as f64).ln(),
    };
    let kept: Vec<&CandidateModel> = candidates.iter().filter(|c| c.pattern.is_subset_of(base)).collect();
    if kept.is_empty() {
        return Err(Error::NoCandidate(
            "no candidate is contained in the weighting pattern".into(),
        ));
    }
    let y1 = data.response(rows);
    let ic = kept
        .iter()
        .map(|c| {
            let ll = match sample {
                IcSample::CompleteCases => {
                    let theta = data.design(rows, &c.pattern.indices) * &c.beta;
                    loglik(family, &theta, &y1)?
                }
                IcSample::OwnSample => c.loglik,
            };
            Ok(-2.0 * ll + pen * c.p_k as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let weights = smoothed_ic_weights(&ic)?;
    let owned: Vec<CandidateModel> = kept.iter().map(|c| (*c).clone()).collect();
    Ok(BaselineResult {
        method: match flavor {
            IcFlavor::Aic => Method::Saic,
            IcFlavor::Bic => Method::Sbic,
        },
        family: *family,
        beta_effective: combine(&owned, &weights, data.p()),
        support: base.clone(),
        impute_zero: false,
        weights: Some(weights),
        metadata: BaselineMeta {
            candidate_patterns: owned.iter().map(|c| c.pattern.indices.clone()).collect(),
            ic,
            n_fit: n_1,
            converged: owned.iter().all(|c| c.converged),
            ..Default::default()
        },
    })
}

/// Zero-imputation averaging: each candidate's covariates are fitted on all n
/// subjects with unavailable cells set to zero, and weights minimize the
/// criterion on all n subjects with λ = 2 (`Opt1`) or log n (`Opt2`).
pub fn fit_imp(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    family: &ExponentialFamily,
    lambda_mode: LambdaMode,
    settings: &AveragingSettings,
) -> Result<BaselineResult> {
    let n = data.n();
    let p = data.p();
    let x0 = data.zero_imputed();
    let y = data.y().clone();
    let fits = fit_imp_candidates(data, index, family, &settings.fit)?;

    let mut theta = DMatrix::zeros(n, fits.len());
    for (k, c) in fits.iter().enumerate() {
        theta.set_column(k, &(&x0 * embed(&c.pattern.indices, &c.beta, p)));
    }
    let ctx = CriterionContext::new(theta, y, fits.iter().map(|c| c.p_k).collect(), *family)?;
    let lambda_n = LambdaChoice::Mode(lambda_mode).resolve(n);
    let wfit = optimize_weights(&ctx, lambda_n, &settings.opt)?;
    Ok(BaselineResult {
        method: match lambda_mode {
            LambdaMode::Opt1 => Method::Imp1,
            LambdaMode::Opt2 => Method::Imp2,
        },
        family: *family,
        beta_effective: combine(&fits, &wfit.weights, p),
        support: (0..p).collect(),
        impute_zero: true,
        weights: Some(wfit.weights),
        metadata: BaselineMeta {
            candidate_patterns: fits.iter().map(|c| c.pattern.indices.clone()).collect(),
            lambda_n: Some(lambda_n),
            criterion: Some(wfit.criterion),
            kkt_residual: Some(wfit.kkt_residual),
            n_fit: n,
            converged: wfit.converged && fits.iter().all(|c| c.converged),
            ..Default::default()
        },
    })
}

/// Candidate fits for zero-imputation averaging: pattern k's columns on all n
/// subjects, unavailable cells set to zero.
pub fn fit_imp_candidates(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    family: &ExponentialFamily,
    opts: &FitOptions,
) -> Result<Vec<CandidateModel>> {
    let n = data.n();
    let x0 = data.zero_imputed();
    let y = data.y().clone();
    (0..index.len())
        .into_par_iter()
        .map(|k| {
            let cols = &index.pattern(k).indices;
            if n < cols.len() {
                return Err(Error::TooFewObservations {
                    pattern: cols.clone(),
                    n,
                    p: cols.len(),
                });
            }
            let xk = x0.select_columns(cols);
            if let Err(dep) = check_rank(&xk, opts.rank_tol) {
                return Err(Error::RankDeficient {
                    columns: dep.iter().map(|&c| cols[c]).collect(),
                    pattern: cols.clone(),
                });
            }
            let fit = fit_glm(&xk, &y, family, opts)?;
            Ok(CandidateModel {
                pattern: Pattern {
                    id: k + 1,
                    indices: cols.clone(),
                },
                beta: fit.beta,
                n_k: n,
                p_k: cols.len(),
                loglik: fit.loglik,
                converged: fit.converged,
                iterations: fit.iterations,
                separation: fit.separation,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlassoOptions {
    pub n_lambda: usize,
    /// Smallest grid value as a fraction of λ_max.
    pub lambda_min_ratio: f64,
    pub cv_folds: usize,
    /// Stop when the gradient-mapping max-norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            n_lambda: 50,
            lambda_min_ratio: 1e-3,
            cv_folds: 5,
            tol: 1e-9,
            max_iter: 20_000,
            seed: 0,
        }
    }
}

/// Group-lasso GLM on a dense design:
/// minimize (1/n) Σ [b(x_i'β) − y_i x_i'β]/φ + λ Σ_g √|g| ‖β_g‖.
/// Columns outside every group are unpenalized.
#[derive(Debug, Clone)]
pub struct GroupLassoProblem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub family: ExponentialFamily,
    /// Column positions in `x`, pairwise disjoint.
    pub groups: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct GroupLassoFit {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GroupLassoProblem {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, family: ExponentialFamily, groups: Vec<Vec<usize>>) -> Result<Self> {
        let p = x.ncols();
        let mut seen = vec![false; p];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::InvalidInput("empty group".into()));
            }
            for &j in g {
                if j >= p || seen[j] {
                    return Err(Error::InvalidInput(format!(
                        "group column {j} out of range or repeated"
                    )));
                }
                seen[j] = true;
            }
        }
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(Error::InvalidInput("group lasso: design and response disagree".into()));
        }
        family.validate_response(&y)?;
        Ok(Self { x, y, family, groups })
    }

    pub fn unpenalized(&self) -> Vec<usize> {
        (0..self.x.ncols())
            .filter(|j| !self.groups.iter().any(|g| g.contains(j)))
            .collect()
    }

    pub fn loss(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.x * beta;
        let s: f64 = eta
            .iter()
            .zip(self.y.iter())
            .map(|(&t, &yi)| self.family.b(t) - yi * t)
            .sum();
        s / (self.family.phi * self.y.len() as f64)
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let eta = &self.x * beta;
        let r = DVector::from_iterator(
            eta.len(),
            eta.iter()
                .zip(self.y.iter())
                .map(|(&t, &yi)| self.family.b_prime(t) - yi),
        );
        self.x.tr_mul(&r) / (self.family.phi * self.y.len() as f64)
    }

    pub fn penalty(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        lambda
            * self
                .groups
                .iter()
                .map(|g| (g.len() as f64).sqrt() * g.iter().map(|&j| beta[j] * beta[j]).sum::<f64>().sqrt())
                .sum::<f64>()
    }

    pub fn objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        self.loss(beta) + self.penalty(beta, lambda)
    }

    /// Block soft-thresholding with threshold t·√|g| per group.
    fn prox(&self, v: &DVector<f64>, t: f64) -> DVector<f64> {
        let mut out = v.clone();
        for g in &self.groups {
            let norm = g.iter().map(|&j| v[j] * v[j]).sum::<f64>().sqrt();
            let thr = t * (g.len() as f64).sqrt();
            let scale = if norm > thr { 1.0 - thr / norm } else { 0.0 };
            for &j in g {
                out[j] = v[j] * scale;
            }
        }
        out
    }

    /// Unpenalized fit of the ungrouped columns with every group at zero.
    pub fn null_fit(&self, opts: &FitOptions) -> Result<DVector<f64>> {
        let free = self.unpenalized();
        let mut beta = DVector::zeros(self.x.ncols());
        if free.is_empty() {
            return Ok(beta);
        }
        let xf = self.x.select_columns(&free);
        let fit = fit_glm(&xf, &self.y, &self.family, opts)?;
        for (c, &j) in free.iter().enumerate() {
            beta[j] = fit.beta[c];
        }
        Ok(beta)
    }

    /// Smallest λ at which every group is zero.
    pub fn lambda_max(&self, null_beta: &DVector<f64>) -> f64 {
        let g = self.gradient(null_beta);
        self.groups
            .iter()
            .map(|grp| grp.iter().map(|&j| g[j] * g[j]).sum::<f64>().sqrt() / (grp.len() as f64).sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest violation of the optimality conditions at `beta`.
    pub fn kkt_violation(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let g = self.gradient(beta);
        let mut worst: f64 = self.unpenalized().iter().map(|&j| g[j].abs()).fold(0.0, f64::max);
        for grp in &self.groups {
            let w = (grp.len() as f64).sqrt();
            let bn = grp.iter().map(|&j| beta[j] * beta[j]).sum::<f64>().sqrt();
            let v = if bn == 0.0 {
                (grp.iter().map(|&j| g[j] * g[j]).sum::<f64>().sqrt() - lambda * w).max(0.0)
            } else {
                grp.iter()
                    .map(|&j| {
                        let r = g[j] + lambda * w * beta[j] / bn;
                        r * r
                    })
                    .sum::<f64>()
                    .sqrt()
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Accelerated proximal gradient with backtracking and adaptive restart.
    pub fn solve(&self, lambda: f64, warm: &DVector<f64>, opts: &GlassoOptions) -> GroupLassoFit {
        let mut x = warm.clone();
        let mut fx = self.objective(&x, lambda);
        let mut z = x.clone();
        let mut t = 1.0_f64;
        let mut l = 1.0_f64;
        let mut converged = false;
        let mut iterations = 0;
        // z == x: a plain proximal step, monotone up to rounding
        let mut at_x = true;
        while iterations < opts.max_iter {
            iterations += 1;
            let gz = self.gradient(&z);
            let fz = self.loss(&z);
            let mut xn;
            loop {
                xn = self.prox(&(&z - &gz / l), lambda / l);
                let d = &xn - &z;
                let fxn = self.loss(&xn);
                if fxn <= fz + gz.dot(&d) + 0.5 * l * d.norm_squared() + 1e-15 * fz.abs() || l > 1e15 {
                    break;
                }
                l *= 2.0;
            }
            let step_norm = (&xn - &z).amax() * l;
            let fxn = self.objective(&xn, lambda);
            if fxn > fx && !at_x {
                // momentum overshot; restart from the last iterate
                z = x.clone();
                t = 1.0;
                at_x = true;
                continue;
            }
            let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            z = &xn + (&xn - &x) * ((t - 1.0) / tn);
            at_x = false;
            x = xn;
            fx = fxn;
            t = tn;
            l *= 0.9;
            if step_norm <= opts.tol {
                converged = true;
                break;
            }
        }
        GroupLassoFit {
            objective: fx,
            beta: x,
            iterations,
            converged,
        }
    }

    /// Loss of the saturated model (θ_i matching y_i exactly).
    fn saturated_loss(&self) -> f64 {
        let s: f64 = self
            .y
            .iter()
            .map(|&yi| match self.family.kind {
                FamilyKind::BinomialLogit => 0.0,
                FamilyKind::GaussianIdentity => -0.5 * yi * yi,
                FamilyKind::PoissonLog if yi > 0.0 => yi - yi * yi.ln(),
                FamilyKind::PoissonLog => 0.0,
            })
            .sum();
        s / (self.family.phi * self.y.len() as f64)
    }

    /// Solutions along a decreasing λ grid with warm starts. The path stops
    /// early once the fit explains 99.9% of the null deviance, or the share
    /// explained gains less than 1e-5 (relative) over a step after the
    /// fifth value, so may be shorter than `lambdas`.
    pub fn path(&self, lambdas: &[f64], start: &DVector<f64>, opts: &GlassoOptions) -> Vec<GroupLassoFit> {
        let sat = self.saturated_loss();
        let null_dev = self.loss(start) - sat;
        let mut warm = start.clone();
        let mut prev_ratio = 0.0;
        let mut out = Vec::with_capacity(lambdas.len());
        for (k, &lam) in lambdas.iter().enumerate() {
            let fit = self.solve(lam, &warm, opts);
            warm = fit.beta.clone();
            out.push(fit);
            if null_dev <= 0.0 {
                continue;
            }
            let ratio = 1.0 - (self.loss(&warm) - sat) / null_dev;
            if ratio > 0.999 || (k >= 5 && ratio - prev_ratio < 1e-5 * ratio) {
                break;
            }
            prev_ratio = ratio;
        }
        out
    }

    fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            family: self.family,
            groups: self.groups.clone(),
        }
    }
}

/// Geometric grid from λ_max down to ratio·λ_max.
pub fn lambda_grid(lambda_max: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lambda_max];
    }
    (0..n)
        .map(|i| lambda_max * ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Fold labels stratified by response: shuffle, stable-sort by y, deal round-robin.
pub fn stratified_folds(y: &DVector<f64>, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut labels = vec![0; y.len()];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

#[derive(Debug, Clone)]
pub struct GlassoSelection {
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub cv_deviance: Vec<f64>,
    /// Indices into the problem's groups with nonzero coefficients.
    pub selected: Vec<usize>,
    pub beta: DVector<f64>,
}

/// λ by K-fold cross-validated deviance, then the full-sample solution at that λ.
pub fn select_group_lasso(
    problem: &GroupLassoProblem,
    fit_opts: &FitOptions,
    opts: &GlassoOptions,
) -> Result<GlassoSelection> {
    let n = problem.y.len();
    if opts.cv_folds < 2 || n < opts.cv_folds {
        return Err(Error::InvalidInput(format!(
            "group lasso needs at least {} complete cases for {}-fold CV, found {n}",
            opts.cv_folds.max(2),
            opts.cv_folds
        )));
    }
    let null = problem.null_fit(fit_opts)?;
    let lambdas = lambda_grid(problem.lambda_max(&null), opts.n_lambda, opts.lambda_min_ratio);
    let labels = stratified_folds(&problem.y, opts.cv_folds, opts.seed);

    let per_fold: Vec<Vec<f64>> = (0..opts.cv_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
            let tr = problem.subset(&train);
            let te = problem.subset(&test);
            let start = tr
                .null_fit(fit_opts)
                .unwrap_or_else(|_| DVector::zeros(problem.x.ncols()));
            tr.path(&lambdas, &start, opts)
                .iter()
                .map(|fit| 2.0 * te.loss(&fit.beta) * test.len() as f64)
                .collect()
        })
        .collect();
    // only the λ values every fold reached
    let reached = per_fold.iter().map(Vec::len).min().unwrap_or(0).max(1);
    let lambdas = lambdas[..reached].to_vec();
    let cv_deviance: Vec<f64> = (0..lambdas.len())
        .map(|l| per_fold.iter().map(|d| d[l]).sum())
        .collect();
    let best = cv_deviance
        .iter()
        .enumerate()
        .fold(0, |b, (i, &d)| if d < cv_deviance[b] { i } else { b });

    let full = problem.path(&lambdas[..=best], &null, opts);
    let best = full.len() - 1;
    let beta = full[best].beta.clone();
    let selected = (0..problem.groups.len())
        .filter(|&g| problem.groups[g].iter().any(|&j| beta[j] != 0.0))
        .collect();
    Ok(GlassoSelection {
        lambda: lambdas[best],
        lambdas,
        cv_deviance,
        selected,
        beta,
    })
}

/// Group lasso on the complete cases, then an unpenalized refit on every
/// subject observing the selected covariates. `groups` hold dataset column
/// indices; columns in no group are kept unpenalized.
pub fn fit_glasso(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    family: &ExponentialFamily,
    groups: &[Vec<usize>],
    fit_opts: &FitOptions,
    opts: &GlassoOptions,
) -> Result<BaselineResult> {
    let base = &index.pattern(0).indices;
    let rows = index.s_set(0);
    // group columns in positions of the CC design
    let mut local_groups = Vec::new();
    for g in groups {
        let local: Vec<usize> = g.iter().filter_map(|j| base.iter().position(|b| b == j)).collect();
        if local.len() < g.len() {
            log::warn!("group {g:?}: columns outside the complete-case pattern are ignored");
        }
        if !local.is_empty() {
            local_groups.push(local);
        }
    }
    let problem = GroupLassoProblem::new(data.design(rows, base), data.response(rows), *family, local_groups)?;
    let sel = select_group_lasso(&problem, fit_opts, opts)?;
    if sel.selected.is_empty() {
        log::warn!("group lasso selected no group; refitting the unpenalized columns only");
    }
    let mut cols: Vec<usize> = problem.unpenalized();
    for &g in &sel.selected {
        cols.extend(&problem.groups[g]);
    }
    let mut cols: Vec<usize> = cols.into_iter().map(|c| base[c]).collect();
    cols.sort_unstable();
    if cols.is_empty() {
        return Err(Error::NoCandidate("group lasso kept no covariates".into()));
    }

    let refit_rows: Vec<usize> = (0..data.n()).filter(|&i| data.observes_all(i, &cols)).collect();
    let x = data.design(&refit_rows, &cols);
    if refit_rows.len() < cols.len() {
        return Err(Error::TooFewObservations {
            pattern: cols.clone(),
            n: refit_rows.len(),
            p: cols.len(),
        });
    }
    if let Err(dep) = check_rank(&x, fit_opts.rank_tol) {
        return Err(Error::RankDeficient {
            columns: dep.iter().map(|&c| cols[c]).collect(),
            pattern: cols,
        });
    }
    let fit = fit_glm(&x, &data.response(&refit_rows), family, fit_opts)?;
    Ok(BaselineResult {
        method: Method::Glasso,
        family: *family,
        beta_effective: embed(&cols, &fit.beta, data.p()),
        support: cols,
        impute_zero: false,
        weights: None,
        metadata: BaselineMeta {
            glasso_lambda: Some(sel.lambda),
            selected_groups: sel.selected,
            n_fit: refit_rows.len(),
            converged: fit.converged,
            ..Default::default()
        },
    })
}

/// Shared inputs for running several methods on one dataset.
#[derive(Debug, Clone, Default)]
pub struct MethodSettings {
    pub averaging: AveragingSettings,
    pub glasso: GlassoOptions,
    pub ic_sample: IcSample,
    /// Column groups for GLASSO; defaults to one group per non-intercept column
    /// of the first pattern when empty.
    pub groups: Vec<Vec<usize>>,
}

/// Runs each requested method. Candidate fits are shared between the
/// averaging, smoothed-IC and complete-case methods. Failures are returned
/// per method.
pub fn fit_methods(
    data: &FragmentaryDataset,
    family: &ExponentialFamily,
    methods: &[Method],
    settings: &MethodSettings,
) -> Result<Vec<(Method, Result<BaselineResult>)>> {
    let index = PatternIndex::build(data, settings.averaging.order)?;
    let needs_candidates = methods
        .iter()
        .any(|m| matches!(m, Method::Opt1 | Method::Opt2 | Method::Saic | Method::Sbic));
    let candidates = if needs_candidates {
        Some(fit_candidates(data, &index, family, &settings.averaging.fit))
    } else {
        None
    };
    let with_candidates = |f: &dyn Fn(&[CandidateModel]) -> Result<BaselineResult>| match &candidates {
        Some(Ok(c)) => f(c),
        Some(Err(e)) => Err(clone_error(e)),
        None => unreachable!("candidates are fitted whenever a method needs them"),
    };
    let out = methods
        .iter()
        .map(|&m| {
            let r = match m {
                Method::Opt1 | Method::Opt2 => with_candidates(&|c| {
                    let mode = if m == Method::Opt1 {
                        LambdaMode::Opt1
                    } else {
                        LambdaMode::Opt2
                    };
                    let model = average_candidates(
                        data,
                        &index,
                        c.to_vec(),
                        family,
                        LambdaChoice::Mode(mode),
                        &settings.averaging.opt,
                    )?;
                    Ok(BaselineResult::from_averaged(m, &model))
                }),
                Method::Saic | Method::Sbic => with_candidates(&|c| {
                    let flavor = if m == Method::Saic {
                        IcFlavor::Aic
                    } else {
                        IcFlavor::Bic
                    };
                    fit_smoothed_ic(data, &index, c, family, flavor, settings.ic_sample)
                }),
                Method::Cc => match &candidates {
                    Some(Ok(c)) => Ok(cc_from_candidate(&c[0], family, data.p())),
                    _ => fit_cc(data, &index, family, &settings.averaging.fit),
                },
                Method::Imp1 => fit_imp(data, &index, family, LambdaMode::Opt1, &settings.averaging),
                Method::Imp2 => fit_imp(data, &index, family, LambdaMode::Opt2, &settings.averaging),
                Method::Glasso => {
                    let groups = if settings.groups.is_empty() {
                        default_groups(data, &index)
                    } else {
                        settings.groups.clone()
                    };
                    fit_glasso(data, &index, family, &groups, &settings.averaging.fit, &settings.glasso)
                }
            };
            if let Err(e) = &r {
                log::warn!("method {m} failed: {e}");
            }
            (m, r)
        })
        .collect();
    Ok(out)
}

/// One singleton group per first-pattern column that is not constant.
fn default_groups(data: &FragmentaryDataset, index: &PatternIndex) -> Vec<Vec<usize>> {
    let rows = index.s_set(0);
    index
        .pattern(0)
        .indices
        .iter()
        .filter(|&&j| {
            let first = data.value(rows[0], j);
            rows.iter().any(|&i| data.value(i, j) != first)
        })
        .map(|&j| vec![j])
        .collect()
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::RankDeficient { pattern, columns } => Error::RankDeficient {
            pattern: pattern.clone(),
            columns: columns.clone(),
        },
        Error::TooFewObservations { pattern, n, p } => Error::TooFewObservations {
            pattern: pattern.clone(),
            n: *n,
            p: *p,
        },
        Error::NonFinite(s) => Error::NonFinite(s),
        Error::NoCandidate(s) => Error::NoCandidate(s.clone()),
        Error::InvalidInput(s) => Error::InvalidInput(s.clone()),
        other => Error::NoCandidate(format!("candidate fits failed: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::patterns::build_pattern_index;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_example() {
        let w = smoothed_ic_weights(&[10.0, 12.0, 14.0]).unwrap();
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let oracle = [1.0 / z, (-1.0f64).exp() / z, (-2.0f64).exp() / z];
        for (a, b) in w.as_slice().iter().zip(oracle) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(w.as_slice()[0], 0.6652, epsilon = 1e-4);
        assert_abs_diff_eq!(w.as_slice()[1], 0.2447, epsilon = 1e-4);
        assert_abs_diff_eq!(w.as_slice()[2], 0.0900, epsilon = 1e-4);
        let shifted = smoothed_ic_weights(&[1010.0, 1012.0, 1014.0]).unwrap();
        for (a, b) in w.as_slice().iter().zip(shifted.as_slice()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        assert_eq!(smoothed_ic_weights(&[3.0, 3.0]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(smoothed_ic_weights(&[7.0]).unwrap().as_slice(), &[1.0]);
        assert!(smoothed_ic_weights(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!(parse_methods("cc,opt1,cc").unwrap(), vec![Method::Cc, Method::Opt1]);
        assert!(parse_methods("opt3").is_err());
    }

    #[test]
    fn cc_matches_first_candidate() {
        let (data, _) = fixtures::adni_like(0.5, 3);
        let index = build_pattern_index(&data).unwrap();
        let fam = ExponentialFamily::binomial();
        let cc = fit_cc(&data, &index, &fam, &FitOptions::default()).unwrap();
        let m1 = fit_candidate(&data, &index, 0, &fam, &FitOptions::default()).unwrap();
        assert_eq!(cc.beta_effective, embed(&m1.pattern.indices, &m1.beta, data.p()));
        assert!(cc.weights.is_none());
    }

    #[test]
    fn imp_candidate_equals_zero_filled_glm() {
        // one covariate plus intercept, half the covariate cells missing
        let rows: Vec<Vec<Option<f64>>> = (0..40)
            .map(|i| {
                let v = ((i * 7) % 11) as f64 / 5.0 - 1.0;
                vec![Some(1.0), (i % 2 == 0).then_some(v)]
            })
            .collect();
        let y: Vec<f64> = (0..40).map(|i| ((i * 3) % 5 < 2) as u8 as f64).collect();
        let data = FragmentaryDataset::from_rows(y.clone(), &rows, vec!["a".into(), "b".into()]).unwrap();
        let index = build_pattern_index(&data).unwrap();
        let fam = ExponentialFamily::binomial();
        let cands = fit_imp_candidates(&data, &index, &fam, &FitOptions::default()).unwrap();
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].pattern.indices, vec![0, 1]);

        let x = DMatrix::from_fn(40, 2, |i, j| rows[i][j].unwrap_or(0.0));
        let direct = fit_glm(&x, &DVector::from_vec(y), &fam, &FitOptions::default()).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(cands[0].beta[j], direct.beta[j], epsilon = 1e-12);
        }
        assert_eq!(cands[0].n_k, 40);

        let imp = fit_imp(&data, &index, &fam, LambdaMode::Opt1, &AveragingSettings::default()).unwrap();
        let pred = imp.predict(&[Some(1.0), None]).unwrap();
        assert_abs_diff_eq!(pred.theta, imp.beta_effective[0], epsilon = 1e-15);
    }

    fn small_problem(seed: u64) -> GroupLassoProblem {
        let (x, y) = fixtures::logistic_problem(60, 5, 2.0, seed);
        GroupLassoProblem::new(x, y, ExponentialFamily::binomial(), vec![vec![1, 2], vec![3, 4]]).unwrap()
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let pr = small_problem(4);
        let null = pr.null_fit(&FitOptions::default()).unwrap();
        let lmax = pr.lambda_max(&null);
        let fit = pr.solve(lmax * 1.0001, &null, &GlassoOptions::default());
        for j in 1..5 {
            assert_eq!(fit.beta[j], 0.0);
        }
        let fit = pr.solve(lmax * 0.7, &null, &GlassoOptions::default());
        assert!((1..5).any(|j| fit.beta[j] != 0.0));
        assert!(pr.kkt_violation(&fit.beta, lmax * 0.7) <= 1e-6);
    }

    #[test]
    fn zero_penalty_matches_mle() {
        let pr = small_problem(5);
        let mle = fit_glm(&pr.x, &pr.y, &pr.family, &FitOptions::default()).unwrap();
        let opts = GlassoOptions {
            tol: 1e-11,
            max_iter: 200_000,
            ..Default::default()
        };
        let fit = pr.solve(0.0, &DVector::zeros(5), &opts);
        for j in 0..5 {
            assert_abs_diff_eq!(fit.beta[j], mle.beta[j], epsilon = 1e-5);
        }
    }

    #[test]
    fn interior_lambda_matches_ista_oracle() {
        let pr = small_problem(6);
        let null = pr.null_fit(&FitOptions::default()).unwrap();
        let lam = 0.3 * pr.lambda_max(&null);
        let fit = pr.solve(lam, &null, &GlassoOptions::default());

        // plain ISTA with a fixed step from the Lipschitz bound ‖X‖²/(4n)
        let l = pr.x.norm_squared() / (4.0 * 60.0);
        let mut b = DVector::zeros(5);
        for _ in 0..200_000 {
            b = pr.prox(&(&b - pr.gradient(&b) / l), lam / l);
        }
        assert!((fit.objective - pr.objective(&b, lam)).abs() <= 1e-6);
        assert!(pr.kkt_violation(&fit.beta, lam) <= 1e-6);
    }

    #[test]
    fn every_path_point_converges() {
        let (x, y) = fixtures::logistic_problem(120, 12, 1.0, 8);
        let groups = vec![vec![1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]];
        let pr = GroupLassoProblem::new(x, y, ExponentialFamily::binomial(), groups).unwrap();
        let null = pr.null_fit(&FitOptions::default()).unwrap();
        let lambdas = lambda_grid(pr.lambda_max(&null), 30, 1e-2);
        let opts = GlassoOptions::default();
        for (fit, &lam) in pr.path(&lambdas, &null, &opts).iter().zip(&lambdas) {
            assert!(
                fit.converged && fit.iterations < 2000,
                "λ = {lam}: {} iterations",
                fit.iterations
            );
            assert!(pr.kkt_violation(&fit.beta, lam) <= 1e-6);
        }
    }

    #[test]
    fn folds_are_stratified() {
        let y = DVector::from_fn(23, |i, _| (i % 3 == 0) as u8 as f64);
        let labels = stratified_folds(&y, 5, 9);
        for f in 0..5 {
            let ones = (0..23).filter(|&i| labels[i] == f && y[i] == 1.0).count();
            assert!((1..=2).contains(&ones));
        }
        assert_eq!(labels, stratified_folds(&y, 5, 9));
    }
}

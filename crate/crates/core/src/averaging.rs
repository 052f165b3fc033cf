//! Model averaging over the candidate models.
//!
//! Each candidate k contributes a column θ^(k) = X_1 Π_k^T β̂_(k) of linear
//! predictors on the weighting sample S_1. For a weight w on the simplex the
//! averaged predictor is θ(w) = Σ_k w_k θ^(k), and weights minimize
//!
//! ```text
//! G(w) = 2/φ · Σ_{i∈S_1} [ b(θ_i(w)) − y_i θ_i(w) ] + λ_n Σ_k w_k p_k
//! ```
//!
//! G is convex in w (b is convex and θ is linear in w), so any point that
//! satisfies the simplex KKT conditions is a global minimizer.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};
use crate::family::{sigmoid, ExponentialFamily, FamilyKind, PROB_CLAMP};
use crate::glm::{fit_candidate, CandidateModel, FitOptions};
use crate::linalg::solve_symmetric;
use crate::patterns::{embed, restrict_to, PatternIndex, PatternOrder};

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(DVector<f64>);

impl WeightVector {
    /// Clips tiny negative entries to zero and renormalizes to sum one.
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < -1e-12) {
            return Err(Error::InvalidInput(format!(
                "weights must be finite and non-negative: {:?}",
                w.as_slice()
            )));
        }
        let w = w.map(|v| v.max(0.0));
        let s = w.sum();
        if s <= 0.0 {
            return Err(Error::InvalidInput("weights sum to zero".into()));
        }
        Ok(Self(w / s))
    }

    pub fn uniform(k: usize) -> Self {
        Self(DVector::from_element(k, 1.0 / k as f64))
    }

    pub fn vertex(k: usize, i: usize) -> Self {
        let mut w = DVector::zeros(k);
        w[i] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl Serialize for WeightVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for WeightVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        WeightVector::new(DVector::from_vec(v)).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// λ_n = 2.
    Opt1,
    /// λ_n = log(n_1).
    Opt2,
}

pub fn lambda_default(mode: LambdaMode, n_1: usize) -> f64 {
    match mode {
        LambdaMode::Opt1 => 2.0,
        LambdaMode::Opt2 => (n_1 as f64).ln(),
    }
}

/// Penalty choice as given on the command line: `2`, `log-n1`, or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaChoice {
    Mode(LambdaMode),
    Fixed(f64),
}

impl LambdaChoice {
    pub fn resolve(&self, n_1: usize) -> f64 {
        match *self {
            LambdaChoice::Mode(m) => lambda_default(m, n_1),
            LambdaChoice::Fixed(v) => v,
        }
    }
}

impl FromStr for LambdaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opt1" => Ok(LambdaChoice::Mode(LambdaMode::Opt1)),
            "log-n1" | "logn1" | "opt2" => Ok(LambdaChoice::Mode(LambdaMode::Opt2)),
            other => match other.parse::<f64>() {
                Ok(2.0) => Ok(LambdaChoice::Mode(LambdaMode::Opt1)),
                Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaChoice::Fixed(v)),
                _ => Err(Error::InvalidInput(format!(
                    "lambda must be 2, log-n1, or a non-negative number; got '{other}'"
                ))),
            },
        }
    }
}

/// Candidate linear predictors on the weighting sample, with the responses
/// and candidate sizes needed to evaluate the weight criterion.
#[derive(Debug, Clone)]
pub struct CriterionContext {
    theta_matrix: DMatrix<f64>,
    y: DVector<f64>,
    p_sizes: Vec<usize>,
    family: ExponentialFamily,
}

impl CriterionContext {
    pub fn new(
        theta_matrix: DMatrix<f64>,
        y: DVector<f64>,
        p_sizes: Vec<usize>,
        family: ExponentialFamily,
    ) -> Result<Self> {
        if theta_matrix.nrows() != y.len() || theta_matrix.ncols() != p_sizes.len() {
            return Err(Error::InvalidInput(format!(
                "criterion context shape mismatch: theta {}x{}, y {}, p_sizes {}",
                theta_matrix.nrows(),
                theta_matrix.ncols(),
                y.len(),
                p_sizes.len()
            )));
        }
        if p_sizes.is_empty() || y.is_empty() {
            return Err(Error::NoCandidate("empty criterion context".into()));
        }
        if theta_matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("candidate linear predictors"));
        }
        Ok(Self {
            theta_matrix,
            y,
            p_sizes,
            family,
        })
    }

    pub fn k(&self) -> usize {
        self.p_sizes.len()
    }

    pub fn n_1(&self) -> usize {
        self.y.len()
    }

    pub fn theta_matrix(&self) -> &DMatrix<f64> {
        &self.theta_matrix
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn p_sizes(&self) -> &[usize] {
        &self.p_sizes
    }

    pub fn family(&self) -> &ExponentialFamily {
        &self.family
    }

    /// θ(w) = Θ w.
    pub fn theta(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.theta_matrix * w
    }

    /// The same context with the response replaced, e.g. by true means.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(self.theta_matrix.clone(), y, self.p_sizes.clone(), self.family)
    }

    fn penalty(&self, w: &DVector<f64>, lambda_n: f64) -> f64 {
        lambda_n * w.iter().zip(&self.p_sizes).map(|(wk, &pk)| wk * pk as f64).sum::<f64>()
    }

    fn value(&self, w: &DVector<f64>, lambda_n: f64) -> f64 {
        let theta = self.theta(w);
        let fam = &self.family;
        let s: f64 = theta
            .iter()
            .zip(self.y.iter())
            .map(|(&t, &yi)| {
                let (t, _) = fam.clamp_theta(t);
                fam.b(t) - yi * t
            })
            .sum();
        2.0 / fam.phi * s + self.penalty(w, lambda_n)
    }

    fn gradient(&self, w: &DVector<f64>, lambda_n: f64) -> DVector<f64> {
        let theta = self.theta(w);
        let fam = &self.family;
        let r = DVector::from_iterator(
            theta.len(),
            theta.iter().zip(self.y.iter()).map(|(&t, &yi)| {
                let (tc, clamped) = fam.clamp_theta(t);
                if clamped {
                    0.0
                } else {
                    fam.b_prime(tc) - yi
                }
            }),
        );
        let mut g = self.theta_matrix.tr_mul(&r) * (2.0 / fam.phi);
        for (gk, &pk) in g.iter_mut().zip(&self.p_sizes) {
            *gk += lambda_n * pk as f64;
        }
        g
    }

    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let theta = self.theta(w);
        let fam = &self.family;
        let mut scaled = self.theta_matrix.clone();
        for (i, &t) in theta.iter().enumerate() {
            let (tc, clamped) = fam.clamp_theta(t);
            let v = if clamped { 0.0 } else { fam.b_double_prime(tc) };
            scaled.row_mut(i).scale_mut(v * 2.0 / fam.phi);
        }
        self.theta_matrix.tr_mul(&scaled)
    }
}

fn check_weights(ctx: &CriterionContext, w: &WeightVector) -> Result<()> {
    if w.len() != ctx.k() {
        return Err(Error::InvalidInput(format!(
            "weight vector has {} entries for {} candidates",
            w.len(),
            ctx.k()
        )));
    }
    Ok(())
}

/// The weight criterion G(w).
pub fn criterion(ctx: &CriterionContext, w: &WeightVector, lambda_n: f64) -> Result<f64> {
    check_weights(ctx, w)?;
    let v = ctx.value(w.as_vector(), lambda_n);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("weight criterion"))
    }
}

/// ∂G/∂w_k = 2/φ Σ_i [b′(θ_i(w)) − y_i] Θ_ik + λ_n p_k.
pub fn criterion_gradient(ctx: &CriterionContext, w: &WeightVector, lambda_n: f64) -> Result<DVector<f64>> {
    check_weights(ctx, w)?;
    let g = ctx.gradient(w.as_vector(), lambda_n);
    if g.iter().all(|v| v.is_finite()) {
        Ok(g)
    } else {
        Err(Error::NonFinite("criterion gradient"))
    }
}

/// The binomial criterion written with fitted probabilities:
/// −2 Σ [y log p̂ + (1 − y) log(1 − p̂)] + λ_n Σ w_k p_k.
pub fn logistic_criterion(ctx: &CriterionContext, w: &WeightVector, lambda_n: f64) -> Result<f64> {
    check_weights(ctx, w)?;
    if ctx.family.kind != FamilyKind::BinomialLogit {
        return Err(Error::InvalidInput(
            "logistic criterion requires the binomial family".into(),
        ));
    }
    let theta = ctx.theta(w.as_vector());
    let s: f64 = theta
        .iter()
        .zip(ctx.y.iter())
        .map(|(&t, &yi)| {
            let p = sigmoid(t).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            yi * p.ln() + (1.0 - yi) * (1.0 - p).ln()
        })
        .sum();
    Ok(-2.0 * s + ctx.penalty(w.as_vector(), lambda_n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptOptions {
    pub max_iter: usize,
    /// Simplex KKT residual at which the optimizer stops.
    pub kkt_tol: f64,
    /// Slack allowed when comparing against vertices and the uniform weight.
    pub obj_tol: f64,
    /// Weights above this count as in the support.
    pub support_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            kkt_tol: 1e-7,
            obj_tol: 1e-7,
            support_tol: 1e-10,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: WeightVector,
    pub criterion: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Euclidean projection onto {w ≥ 0, Σ w = 1}.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j as f64 + 1.0);
        if uj - t > 0.0 {
            tau = t;
        }
    }
    v.map(|x| (x - tau).max(0.0))
}

/// Smallest t such that some μ has |g_k − μ| ≤ t on the support and
/// g_k ≥ μ − t elsewhere; zero exactly at a KKT point of the simplex problem.
pub fn kkt_residual(w: &DVector<f64>, g: &DVector<f64>, support_tol: f64) -> f64 {
    let max_support = w
        .iter()
        .zip(g.iter())
        .filter(|(wk, _)| **wk > support_tol)
        .map(|(_, gk)| *gk)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_all = g.iter().copied().fold(f64::INFINITY, f64::min);
    if max_support == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * (max_support - min_all)
}

/// ŵ = argmin over the simplex of G(w): projected gradient with Armijo
/// backtracking from the uniform weight, finished by Newton steps on the
/// active face once the support has settled.
pub fn optimize_weights(ctx: &CriterionContext, lambda_n: f64, opts: &OptOptions) -> Result<WeightFit> {
    let k = ctx.k();
    let uniform = WeightVector::uniform(k);
    let f_uniform = criterion(ctx, &uniform, lambda_n)?;
    if k == 1 {
        return Ok(WeightFit {
            weights: uniform,
            criterion: f_uniform,
            iterations: 0,
            converged: true,
            kkt_residual: 0.0,
        });
    }

    let mut w = uniform.as_vector().clone();
    let mut f = f_uniform;
    let mut g = ctx.gradient(&w, lambda_n);
    let mut step = 1.0 / g.norm().max(1.0);
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = kkt_residual(&w, &g, opts.support_tol);

    while iterations < opts.max_iter {
        if residual <= opts.kkt_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // projected gradient step with backtracking
        let mut t = step;
        let mut moved = false;
        for _ in 0..60 {
            let cand = project_simplex(&(&w - &g * t));
            let d = &cand - &w;
            if d.amax() == 0.0 {
                break;
            }
            let fc = ctx.value(&cand, lambda_n);
            if fc.is_finite() && fc <= f + opts.armijo * g.dot(&d) {
                let gc = ctx.gradient(&cand, lambda_n);
                let s = &cand - &w;
                let yv = &gc - &g;
                let sy = s.dot(&yv);
                step = if sy > 0.0 {
                    (s.norm_squared() / sy).clamp(1e-12, 1e12)
                } else {
                    t * 2.0
                };
                w = cand;
                f = fc;
                g = gc;
                moved = true;
                break;
            }
            t *= 0.5;
        }

        if let Some((wn, fnew, gn)) = face_newton(ctx, &w, f, &g, lambda_n, opts) {
            w = wn;
            f = fnew;
            g = gn;
            moved = true;
        }
        residual = kkt_residual(&w, &g, opts.support_tol);
        if !moved {
            converged = residual <= opts.kkt_tol;
            break;
        }
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("weight criterion"));
    }

    // ŵ must not lose to any vertex
    for v in 0..k {
        let e = WeightVector::vertex(k, v);
        let fv = ctx.value(e.as_vector(), lambda_n);
        if fv + opts.obj_tol < f {
            log::warn!("weight optimizer ended above vertex {v}: {f} > {fv}");
            w = e.as_vector().clone();
            f = fv;
            g = ctx.gradient(&w, lambda_n);
            residual = kkt_residual(&w, &g, opts.support_tol);
            converged = residual <= opts.kkt_tol;
        }
    }
    if !converged {
        log::warn!("weight optimizer stopped after {iterations} iterations, KKT residual {residual:.3e}");
    }
    Ok(WeightFit {
        weights: WeightVector::new(w)?,
        criterion: f,
        iterations,
        converged,
        kkt_residual: residual,
    })
}

/// Newton iterations restricted to the face {w_k > support_tol}, holding the
/// sum fixed. Returns the improved point, or None if nothing was gained.
fn face_newton(
    ctx: &CriterionContext,
    w0: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    lambda_n: f64,
    opts: &OptOptions,
) -> Option<(DVector<f64>, f64, DVector<f64>)> {
    let (mut w, mut f, mut g) = (w0.clone(), f0, g0.clone());
    let mut improved = false;
    for _ in 0..20 {
        let face: Vec<usize> = (0..w.len()).filter(|&i| w[i] > opts.support_tol).collect();
        let m = face.len();
        if m < 2 {
            break;
        }
        let h = ctx.hessian(&w);
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (a, &i) in face.iter().enumerate() {
            for (b, &j) in face.iter().enumerate() {
                kkt[(a, b)] = h[(i, j)];
            }
            kkt[(a, m)] = 1.0;
            kkt[(m, a)] = 1.0;
            rhs[a] = -g[i];
        }
        let sol = solve_symmetric(&kkt, &rhs)?;
        let d = sol.rows(0, m).into_owned();
        if d.amax() <= 1e-16 {
            break;
        }
        // longest feasible step, capped at 1
        let mut t_max: f64 = 1.0;
        for (a, &i) in face.iter().enumerate() {
            if d[a] < 0.0 {
                t_max = t_max.min(-w[i] / d[a]);
            }
        }
        let mut t = t_max;
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = w.clone();
            for (a, &i) in face.iter().enumerate() {
                cand[i] = (cand[i] + t * d[a]).max(0.0);
            }
            let s = cand.sum();
            cand /= s;
            let fc = ctx.value(&cand, lambda_n);
            // near the optimum G is flat to rounding, so a step that only
            // improves stationarity is still taken
            let noise = 1e-12 * (1.0 + f.abs());
            if fc.is_finite() && fc <= f + noise {
                let gc = ctx.gradient(&cand, lambda_n);
                let better = fc < f - noise
                    || kkt_residual(&cand, &gc, opts.support_tol) < kkt_residual(&w, &g, opts.support_tol);
                if better {
                    w = cand;
                    f = fc;
                    g = gc;
                    accepted = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        improved = true;
        // Newton converges fast here; go well past the stopping tolerance
        if kkt_residual(&w, &g, opts.support_tol) <= 1e-3 * opts.kkt_tol {
            break;
        }
    }
    improved.then_some((w, f, g))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AveragingSettings {
    pub fit: FitOptions,
    pub opt: OptOptions,
    pub order: PatternOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// True when the weighting pattern contains every column.
    pub complete_cases: bool,
    /// Patterns dropped because they are not contained in the weighting pattern.
    pub excluded_patterns: Vec<Vec<usize>>,
}

/// Candidate set, selected weights and the combined coefficient vector
/// β̂(ŵ) = Σ_k ŵ_k Π_k^T β̂_(k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedModel {
    pub family: ExponentialFamily,
    pub column_names: Vec<String>,
    pub lambda_n: f64,
    pub candidates: Vec<CandidateModel>,
    pub weights: WeightVector,
    #[serde(with = "crate::serde_vec")]
    pub beta_combined: DVector<f64>,
    pub criterion_value: f64,
    /// Columns of the weighting pattern (Δ_1); predictions need all of them.
    pub weighting_pattern: Vec<usize>,
    pub n_1: usize,
    pub diagnostics: AveragingDiagnostics,
}

/// Fits every candidate model of the index. Fits are independent and run in parallel.
pub fn fit_candidates(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    family: &ExponentialFamily,
    opts: &FitOptions,
) -> Result<Vec<CandidateModel>> {
    (0..index.len())
        .into_par_iter()
        .map(|k| fit_candidate(data, index, k, family, opts))
        .collect()
}

/// Builds the criterion context on S_1 of the first pattern. Candidates whose
/// pattern is not contained in Δ_1 cannot be evaluated there and are skipped;
/// the positions of the kept candidates are returned.
pub fn weighting_context(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    candidates: &[CandidateModel],
    family: &ExponentialFamily,
) -> Result<(CriterionContext, Vec<usize>)> {
    let base = &index.pattern(0).indices;
    let rows = index.s_set(0);
    let kept: Vec<usize> = (0..candidates.len())
        .filter(|&k| candidates[k].pattern.is_subset_of(base))
        .collect();
    if kept.is_empty() {
        return Err(Error::NoCandidate(
            "no candidate is contained in the weighting pattern".into(),
        ));
    }
    let x1 = data.design(rows, base);
    let mut theta = DMatrix::zeros(rows.len(), kept.len());
    for (c, &k) in kept.iter().enumerate() {
        let full = embed(&candidates[k].pattern.indices, &candidates[k].beta, data.p());
        let sub = DVector::from_iterator(base.len(), base.iter().map(|&j| full[j]));
        theta.set_column(c, &(&x1 * sub));
    }
    let p_sizes = kept.iter().map(|&k| candidates[k].p_k).collect();
    let ctx = CriterionContext::new(theta, data.response(rows), p_sizes, *family)?;
    Ok((ctx, kept))
}

/// Weight selection and combination for already-fitted candidates.
pub fn average_candidates(
    data: &FragmentaryDataset,
    index: &PatternIndex,
    candidates: Vec<CandidateModel>,
    family: &ExponentialFamily,
    lambda: LambdaChoice,
    opts: &OptOptions,
) -> Result<AveragedModel> {
    if !index.has_full_pattern() {
        log::warn!(
            "no subject observes every covariate; weighting on S of pattern {:?}",
            index.pattern(0).indices
        );
    }
    let (ctx, kept) = weighting_context(data, index, &candidates, family)?;
    let excluded: Vec<Vec<usize>> = (0..candidates.len())
        .filter(|k| !kept.contains(k))
        .map(|k| candidates[k].pattern.indices.clone())
        .collect();
    if !excluded.is_empty() {
        log::warn!("candidates not evaluable on the weighting sample were excluded: {excluded:?}");
    }
    let lambda_n = lambda.resolve(ctx.n_1());
    let fit = optimize_weights(&ctx, lambda_n, opts)?;
    let candidates: Vec<CandidateModel> = candidates
        .into_iter()
        .enumerate()
        .filter(|(k, _)| kept.contains(k))
        .map(|(_, c)| c)
        .collect();
    let beta_combined = combine(&candidates, &fit.weights, data.p());
    Ok(AveragedModel {
        family: *family,
        column_names: data.column_names().to_vec(),
        lambda_n,
        candidates,
        weights: fit.weights,
        beta_combined,
        criterion_value: fit.criterion,
        weighting_pattern: index.pattern(0).indices.clone(),
        n_1: ctx.n_1(),
        diagnostics: AveragingDiagnostics {
            converged: fit.converged,
            iterations: fit.iterations,
            kkt_residual: fit.kkt_residual,
            complete_cases: index.has_full_pattern(),
            excluded_patterns: excluded,
        },
    })
}

/// Full pipeline: pattern index, candidate fits, weight selection.
pub fn fit_averaged(
    data: &FragmentaryDataset,
    family: &ExponentialFamily,
    lambda: LambdaChoice,
    settings: &AveragingSettings,
) -> Result<AveragedModel> {
    let index = PatternIndex::build(data, settings.order)?;
    let candidates = fit_candidates(data, &index, family, &settings.fit)?;
    average_candidates(data, &index, candidates, family, lambda, &settings.opt)
}

/// Σ_k w_k Π_k^T β̂_(k).
pub fn combine(candidates: &[CandidateModel], weights: &WeightVector, p: usize) -> DVector<f64> {
    let mut beta = DVector::zeros(p);
    for (c, &wk) in candidates.iter().zip(weights.as_slice()) {
        beta += embed(&c.pattern.indices, &c.beta, p) * wk;
    }
    beta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub theta: f64,
    pub mean: f64,
}

impl AveragedModel {
    pub fn predict_dense(&self, x_full: &[f64]) -> Prediction {
        let theta = self
            .weighting_pattern
            .iter()
            .map(|&j| x_full[j] * self.beta_combined[j])
            .sum();
        Prediction {
            theta,
            mean: self.family.b_prime(theta),
        }
    }

    /// Whether a query row observes every column the averaged model needs.
    pub fn covers(&self, x_full: &[Option<f64>]) -> bool {
        self.weighting_pattern
            .iter()
            .all(|&j| x_full.get(j).copied().flatten().is_some())
    }
}

/// θ̂ = x^T β̂(ŵ) and the fitted mean b′(θ̂).
pub fn predict(model: &AveragedModel, x_full: &[Option<f64>]) -> Result<Prediction> {
    let mut theta = 0.0;
    for &j in &model.weighting_pattern {
        let v = x_full
            .get(j)
            .copied()
            .flatten()
            .ok_or(Error::Unobserved { column: j })?;
        theta += v * model.beta_combined[j];
    }
    Ok(Prediction {
        theta,
        mean: model.family.b_prime(theta),
    })
}

#[derive(Debug, Clone)]
pub struct PatternPrediction {
    pub prediction: Prediction,
    /// Columns of the query's availability pattern D*, in the original numbering.
    pub columns: Vec<usize>,
    /// Model fitted on the data restricted to D*.
    pub model: AveragedModel,
}

/// Prediction for a subject observing only D*: covariates outside D* are
/// ignored, candidates are rebuilt on the restricted data, weights are
/// reselected on its complete cases, and the query is predicted.
pub fn predict_for_pattern(
    data: &FragmentaryDataset,
    family: &ExponentialFamily,
    lambda: LambdaChoice,
    settings: &AveragingSettings,
    x_star: &[Option<f64>],
) -> Result<PatternPrediction> {
    let model = fit_for_pattern(data, family, lambda, settings, &observed_columns(x_star))?;
    let columns = observed_columns(x_star);
    let x_restricted: Vec<Option<f64>> = columns.iter().map(|&j| x_star[j]).collect();
    let prediction = predict(&model, &x_restricted)?;
    Ok(PatternPrediction {
        prediction,
        columns,
        model,
    })
}

pub fn observed_columns(x: &[Option<f64>]) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| v.is_some())
        .map(|(j, _)| j)
        .collect()
}

/// Averaged model on the data restricted to `columns` (the D* universe).
pub fn fit_for_pattern(
    data: &FragmentaryDataset,
    family: &ExponentialFamily,
    lambda: LambdaChoice,
    settings: &AveragingSettings,
    columns: &[usize],
) -> Result<AveragedModel> {
    if columns.is_empty() {
        return Err(Error::InvalidInput("query observes no covariates".into()));
    }
    let restricted = restrict_to(data, columns)?;
    fit_averaged(&restricted, family, lambda, settings).map_err(|e| match e {
        Error::NoCandidate(m) => Error::NoCandidate(format!("after restriction to {columns:?}: {m}")),
        other => other,
    })
}

/// The true distribution for a KL evaluation, as canonical parameters or means.
#[derive(Debug, Clone, Copy)]
pub enum KlTruth<'a> {
    Theta(&'a DVector<f64>),
    Mean(&'a DVector<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlLoss {
    /// Twice the summed KL divergence of the fitted from the true distributions.
    pub total: f64,
    pub n: usize,
    /// Fitted binomial means that had to be clamped away from 0 or 1.
    pub clamped: usize,
}

impl KlLoss {
    pub fn per_observation(&self) -> f64 {
        self.total / self.n as f64
    }
}

fn xlogy_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a / b).ln()
    }
}

/// KL loss 2 Σ_i KL(f(·|θ_0i) ‖ f(·|θ̂_i)) = 2/φ Σ [b(θ̂) − b(θ_0) − μ(θ̂ − θ_0)].
pub fn kl_loss(theta_hat: &DVector<f64>, truth: KlTruth<'_>, family: &ExponentialFamily) -> Result<KlLoss> {
    let n = theta_hat.len();
    let truth_len = match truth {
        KlTruth::Theta(t) | KlTruth::Mean(t) => t.len(),
    };
    if truth_len != n {
        return Err(Error::InvalidInput(format!(
            "kl_loss: {n} fitted values, {truth_len} true values"
        )));
    }
    if theta_hat.iter().any(|t| t.is_nan()) {
        return Err(Error::NonFinite("fitted linear predictor"));
    }
    let mut clamped = 0;
    let total = match family.kind {
        FamilyKind::BinomialLogit => {
            let mu: Vec<f64> = match truth {
                KlTruth::Theta(t) => t.iter().map(|&v| sigmoid(v)).collect(),
                KlTruth::Mean(m) => m.iter().copied().collect(),
            };
            if let Some(m) = mu.iter().find(|m| !(0.0..=1.0).contains(*m)) {
                return Err(Error::InvalidInput(format!("binomial mean {m} outside [0, 1]")));
            }
            2.0 * theta_hat
                .iter()
                .zip(mu)
                .map(|(&t, m)| {
                    let raw = sigmoid(t);
                    let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    if p != raw {
                        clamped += 1;
                    }
                    xlogy_ratio(m, p) + xlogy_ratio(1.0 - m, 1.0 - p)
                })
                .sum::<f64>()
        }
        _ => {
            let terms: Vec<f64> = match truth {
                KlTruth::Theta(t0) => theta_hat
                    .iter()
                    .zip(t0.iter())
                    .map(|(&t, &t0)| family.b(t) - family.b(t0) - family.b_prime(t0) * (t - t0))
                    .collect(),
                KlTruth::Mean(mu) => {
                    if family.kind == FamilyKind::PoissonLog {
                        if let Some(m) = mu.iter().find(|m| **m < 0.0) {
                            return Err(Error::InvalidInput(format!("poisson mean {m} is negative")));
                        }
                    }
                    // b(θ_0) − μθ_0 written in μ so that a zero poisson mean stays finite
                    theta_hat
                        .iter()
                        .zip(mu.iter())
                        .map(|(&t, &m)| {
                            let conj = match family.kind {
                                FamilyKind::PoissonLog => m - xlogy_ratio(m, 1.0),
                                _ => family.b(family.theta_of_mean(m)) - m * family.theta_of_mean(m),
                            };
                            family.b(t) - m * t - conj
                        })
                        .collect()
                }
            };
            2.0 / family.phi * terms.iter().sum::<f64>()
        }
    };
    if clamped > 0 {
        log::warn!("kl_loss: {clamped} fitted probabilities clamped to [{PROB_CLAMP}, 1 - {PROB_CLAMP}]");
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("kl loss"));
    }
    Ok(KlLoss { total, n, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx3() -> CriterionContext {
        // n_1 = 3, two candidates
        let theta = DMatrix::from_row_slice(3, 2, &[0.4, -0.2, 1.5, 0.9, -1.1, -0.3]);
        let y = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        CriterionContext::new(theta, y, vec![2, 3], ExponentialFamily::binomial()).unwrap()
    }

    #[test]
    fn two_candidate_logistic_matches_term_by_term() {
        let ctx = ctx3();
        let w = WeightVector::new(DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let got = criterion(&ctx, &w, 2.0).unwrap();
        // θ(w) = (0.1, 1.2, -0.7)
        let thetas = [0.1_f64, 1.2, -0.7];
        let ys = [1.0, 1.0, 0.0];
        let mut oracle = 0.0;
        for (t, y) in thetas.iter().zip(ys) {
            let p = 1.0 / (1.0 + (-t).exp());
            oracle += -2.0 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        oracle += 2.0 * (0.5 * 2.0 + 0.5 * 3.0);
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(logistic_criterion(&ctx, &w, 2.0).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn single_candidate_reduces_to_loglik() {
        let theta = DMatrix::from_column_slice(4, 1, &[0.3, -0.5, 2.0, 0.1]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0]);
        let fam = ExponentialFamily::binomial();
        let ll = crate::family::loglik(&fam, &theta.column(0).into_owned(), &y).unwrap();
        let ctx = CriterionContext::new(theta, y, vec![3], fam).unwrap();
        let w = WeightVector::uniform(1);
        assert_abs_diff_eq!(
            criterion(&ctx, &w, 2.0).unwrap(),
            -2.0 * ll + 2.0 * 3.0,
            epsilon = 1e-12
        );
        let fit = optimize_weights(&ctx, 2.0, &OptOptions::default()).unwrap();
        assert_eq!(fit.weights.as_slice(), &[1.0]);
        // d/dw of the scalar reduction at w = 1
        let g = criterion_gradient(&ctx, &w, 2.0).unwrap();
        let h = 1e-6;
        let f = |s: f64| ctx.value(&DVector::from_vec(vec![s]), 2.0);
        assert_abs_diff_eq!(g[0], (f(1.0 + h) - f(1.0 - h)) / (2.0 * h), epsilon = 1e-5);
    }

    #[test]
    fn gaussian_direct_expansion() {
        let theta = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.3]);
        let y = DVector::from_vec(vec![0.7, -0.2, 1.1]);
        let ctx = CriterionContext::new(theta.clone(), y.clone(), vec![1, 2], ExponentialFamily::gaussian()).unwrap();
        let w = WeightVector::new(DVector::from_vec(vec![0.3, 0.7])).unwrap();
        let t = theta * w.as_vector();
        let oracle = t.norm_squared() - 2.0 * y.dot(&t);
        assert_abs_diff_eq!(criterion(&ctx, &w, 0.0).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn identical_columns_flat_objective() {
        let col = [0.2, -0.4, 1.0, 0.3, -1.2];
        let mut theta = DMatrix::zeros(5, 2);
        for i in 0..5 {
            theta[(i, 0)] = col[i];
            theta[(i, 1)] = col[i];
        }
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        let ctx = CriterionContext::new(theta.clone(), y.clone(), vec![2, 2], ExponentialFamily::binomial()).unwrap();
        let fit = optimize_weights(&ctx, 2.0, &OptOptions::default()).unwrap();
        let f_vertex = criterion(&ctx, &WeightVector::vertex(2, 0), 2.0).unwrap();
        assert_abs_diff_eq!(fit.criterion, f_vertex, epsilon = 1e-9);

        // unequal sizes: the penalty breaks the tie toward the smaller model
        let ctx = CriterionContext::new(theta, y, vec![1, 3], ExponentialFamily::binomial()).unwrap();
        for lambda in [0.01, 2.0, 7.0] {
            let fit = optimize_weights(&ctx, lambda, &OptOptions::default()).unwrap();
            assert!(fit.weights.as_slice()[0] >= 1.0 - 1e-6, "{:?}", fit.weights);
        }
    }

    #[test]
    fn zero_residual_gradient_is_penalty_only() {
        // y equals the (identical) candidate columns, so b'(θ) − y = 0
        let col = [0.5, -1.0, 2.0];
        let theta = DMatrix::from_fn(3, 2, |i, _| col[i]);
        let y = DVector::from_vec(col.to_vec());
        let ctx = CriterionContext::new(theta, y, vec![2, 5], ExponentialFamily::gaussian()).unwrap();
        let g = criterion_gradient(&ctx, &WeightVector::uniform(2), 1.5).unwrap();
        assert_abs_diff_eq!(g[0], 1.5 * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 1.5 * 5.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_onto_simplex() {
        let v = DVector::from_vec(vec![0.5, 0.2, 0.9]);
        let p = project_simplex(&v);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 0.7, epsilon = 1e-12);
        let inside = DVector::from_vec(vec![0.25, 0.25, 0.5]);
        assert_eq!(project_simplex(&inside), inside);
    }

    #[test]
    fn lambda_defaults() {
        assert_eq!(lambda_default(LambdaMode::Opt1, 17), 2.0);
        assert_eq!(lambda_default(LambdaMode::Opt2, 1), 0.0);
        assert_abs_diff_eq!(lambda_default(LambdaMode::Opt2, 409), 6.0137, epsilon = 1e-4);
        assert_eq!(
            "2".parse::<LambdaChoice>().unwrap(),
            LambdaChoice::Mode(LambdaMode::Opt1)
        );
        assert_eq!(
            "log-n1".parse::<LambdaChoice>().unwrap(),
            LambdaChoice::Mode(LambdaMode::Opt2)
        );
        assert_eq!("0.5".parse::<LambdaChoice>().unwrap(), LambdaChoice::Fixed(0.5));
        assert!("-1".parse::<LambdaChoice>().is_err());
    }

    #[test]
    fn kl_examples() {
        let fam = ExponentialFamily::binomial();
        let t = DVector::from_vec(vec![0.3, -1.0]);
        assert_abs_diff_eq!(
            kl_loss(&t, KlTruth::Theta(&t), &fam).unwrap().total,
            0.0,
            epsilon = 1e-15
        );
        let zero = DVector::from_vec(vec![0.0]);
        let half = DVector::from_vec(vec![0.5]);
        assert_abs_diff_eq!(
            kl_loss(&zero, KlTruth::Mean(&half), &fam).unwrap().total,
            0.0,
            epsilon = 1e-15
        );
        let mu = DVector::from_vec(vec![0.8]);
        let kl = kl_loss(&zero, KlTruth::Mean(&mu), &fam).unwrap();
        let oracle = 2.0 * (0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln());
        assert_abs_diff_eq!(kl.total, oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(kl.total, 0.3855, epsilon = 1e-4);
        assert_eq!(kl.per_observation(), kl.total);
    }

    #[test]
    fn kl_clamps_extreme_fits() {
        let fam = ExponentialFamily::binomial();
        let t = DVector::from_vec(vec![80.0]);
        let mu = DVector::from_vec(vec![0.3]);
        let kl = kl_loss(&t, KlTruth::Mean(&mu), &fam).unwrap();
        assert_eq!(kl.clamped, 1);
        assert!(kl.total.is_finite() && kl.total > 0.0);
    }

    #[test]
    fn kl_generic_families() {
        let g = ExponentialFamily::gaussian();
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::from_vec(vec![0.5, 2.5]);
        // gaussian: 2 · Σ (θ̂ − θ_0)² / 2
        assert_abs_diff_eq!(kl_loss(&a, KlTruth::Theta(&b), &g).unwrap().total, 0.5, epsilon = 1e-14);
        let p = ExponentialFamily::poisson();
        let mean = b.map(f64::exp);
        let via_mean = kl_loss(&a, KlTruth::Mean(&mean), &p).unwrap().total;
        let via_theta = kl_loss(&a, KlTruth::Theta(&b), &p).unwrap().total;
        assert_abs_diff_eq!(via_mean, via_theta, epsilon = 1e-12);
        assert!(via_theta > 0.0);
        // zero count: 2 e^θ̂
        let zero = DVector::from_vec(vec![0.0]);
        let t = DVector::from_vec(vec![0.4]);
        assert_abs_diff_eq!(
            kl_loss(&t, KlTruth::Mean(&zero), &p).unwrap().total,
            2.0 * 0.4f64.exp(),
            epsilon = 1e-14
        );
    }
}

//! Monte Carlo study with block-missing logistic data.
//!
//! Each replication draws an intercept plus p − 1 equicorrelated normal
//! covariates with mean 1, a Bernoulli response from all p of them, then hides
//! the last covariate from every model. The remaining non-intercept columns
//! form three blocks of four; a block is observed iff its first column is below 1.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{
    fit_candidates, kl_loss, optimize_weights, weighting_context, KlTruth, LambdaChoice, LambdaMode, OptOptions,
    WeightVector,
};
use crate::baselines::{fit_methods, BaselineResult, Method, MethodSettings};
use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};
use crate::family::{sigmoid, ExponentialFamily};
use crate::io::format_num;
use crate::patterns::{PatternIndex, PatternOrder};

/// Replications with fewer complete cases than columns are redrawn at most this often.
pub const MAX_ATTEMPTS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaCase {
    /// 0.4 · (1, 1/2, …, 1/p)
    Decay,
    /// 0.1 · (1, …, 1)
    Flat,
    /// 0.2 · (1/p, …, 1/2, 1)
    Rise,
}

impl BetaCase {
    pub fn beta(&self, p: usize) -> Vec<f64> {
        (1..=p)
            .map(|j| match self {
                BetaCase::Decay => 0.4 / j as f64,
                BetaCase::Flat => 0.1,
                BetaCase::Rise => 0.2 / (p + 1 - j) as f64,
            })
            .collect()
    }
}

impl fmt::Display for BetaCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetaCase::Decay => "decay",
            BetaCase::Flat => "flat",
            BetaCase::Rise => "rise",
        })
    }
}

impl FromStr for BetaCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "decay" | "1" => Ok(BetaCase::Decay),
            "flat" | "2" => Ok(BetaCase::Flat),
            "rise" | "3" => Ok(BetaCase::Rise),
            other => Err(Error::InvalidInput(format!("unknown beta case '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub beta_case: BetaCase,
    pub rho: f64,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
}

impl SimConfig {
    pub fn new(n: usize, rho: f64, beta_case: BetaCase, reps: usize, seed: u64) -> Self {
        Self {
            n,
            p: 14,
            beta_case,
            rho,
            reps,
            seed,
            methods: Method::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p != 14 {
            return Err(Error::InvalidInput(format!(
                "the block layout needs p = 14 (intercept, 12 observed covariates, 1 hidden), got {}",
                self.p
            )));
        }
        if self.n < self.p {
            return Err(Error::InvalidInput(format!(
                "n = {} is smaller than p = {}",
                self.n, self.p
            )));
        }
        let lower = -1.0 / (self.p as f64 - 2.0);
        if !(self.rho > lower && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!(
                "rho must lie in ({lower:.4}, 1), got {}",
                self.rho
            )));
        }
        if self.rho < 0.0 {
            // the one-factor construction needs a real √ρ
            return Err(Error::InvalidInput(
                "negative rho is not supported by the factor construction".into(),
            ));
        }
        if self.reps == 0 {
            return Err(Error::InvalidInput("reps must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no methods requested".into()));
        }
        Ok(())
    }

    /// Number of columns the models see (the last covariate is hidden).
    pub fn observed_columns(&self) -> usize {
        self.p - 1
    }
}

/// 1-based observed column ranges of the three availability blocks.
pub const BLOCKS: [std::ops::RangeInclusive<usize>; 3] = [2..=5, 6..=9, 10..=13];

#[derive(Debug, Clone)]
pub struct Replication {
    pub data: FragmentaryDataset,
    /// True linear predictor Σ_j β_j x_ij over all p covariates.
    pub theta_true: DVector<f64>,
    pub p_true: DVector<f64>,
    /// Draws needed to obtain a usable replication (1 when the first one was).
    pub attempts: u64,
}

impl Replication {
    /// Subjects observing every column.
    pub fn complete_cases(&self) -> Vec<usize> {
        let all: Vec<usize> = (0..self.data.p()).collect();
        (0..self.data.n())
            .filter(|&i| self.data.observes_all(i, &all))
            .collect()
    }
}

fn stream_rng(seed: u64, rep: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rep as u64) << 16) | attempt);
    rng
}

/// Draws one replication on sub-stream `attempt` without any degeneracy check.
pub fn draw_replication(cfg: &SimConfig, rep: usize, attempt: u64) -> Result<Replication> {
    let mut rng = stream_rng(cfg.seed, rep, attempt);
    let p = cfg.p;
    let beta = cfg.beta_case.beta(p);
    let (a, b) = (cfg.rho.sqrt(), (1.0 - cfg.rho).sqrt());
    let mut rows = Vec::with_capacity(cfg.n);
    let mut y = Vec::with_capacity(cfg.n);
    let mut theta = Vec::with_capacity(cfg.n);
    let mut x = vec![0.0; p];
    for _ in 0..cfg.n {
        let z0: f64 = rng.sample(StandardNormal);
        x[0] = 1.0;
        for xj in x.iter_mut().skip(1) {
            let zj: f64 = rng.sample(StandardNormal);
            *xj = 1.0 + a * z0 + b * zj;
        }
        let t: f64 = x.iter().zip(&beta).map(|(xj, bj)| xj * bj).sum();
        let u: f64 = rng.random();
        y.push(if u < sigmoid(t) { 1.0 } else { 0.0 });
        theta.push(t);

        let mut row: Vec<Option<f64>> = x[..p - 1].iter().map(|&v| Some(v)).collect();
        for block in &BLOCKS {
            if x[block.start() - 1] >= 1.0 {
                for j in block.clone() {
                    row[j - 1] = None;
                }
            }
        }
        rows.push(row);
    }
    let names = std::iter::once("intercept".to_string())
        .chain((2..p).map(|j| format!("X{j}")))
        .collect();
    let data = FragmentaryDataset::from_rows(y, &rows, names)?;
    let theta_true = DVector::from_vec(theta);
    let p_true = theta_true.map(sigmoid);
    Ok(Replication {
        data,
        theta_true,
        p_true,
        attempts: attempt + 1,
    })
}

/// Draws replication `rep`, redrawing on the next sub-stream while there are
/// fewer complete cases than observed columns.
pub fn generate_replication(cfg: &SimConfig, rep: usize) -> Result<Replication> {
    let need = cfg.observed_columns();
    for attempt in 0..MAX_ATTEMPTS {
        let r = draw_replication(cfg, rep, attempt)?;
        let n_1 = r.complete_cases().len();
        if n_1 >= need {
            if attempt > 0 {
                log::info!("replication {rep}: redrawn {attempt} time(s) for too few complete cases");
            }
            return Ok(r);
        }
    }
    Err(Error::NoCandidate(format!(
        "replication {rep}: no draw with at least {need} complete cases in {MAX_ATTEMPTS} attempts"
    )))
}

/// 1/8 + 3 asin(ρ)/(4π): probability that all three lead covariates fall below their mean.
pub fn cc_fraction_theory(rho: f64) -> f64 {
    0.125 + 3.0 * rho.asin() / (4.0 * std::f64::consts::PI)
}

/// Complete-case fraction of one large draw.
pub fn cc_fraction_draw(n: usize, rho: f64, seed: u64) -> Result<f64> {
    let cfg = SimConfig {
        n,
        ..SimConfig::new(n, rho, BetaCase::Decay, 1, seed)
    };
    let r = draw_replication(&cfg, 0, 0)?;
    Ok(r.complete_cases().len() as f64 / n as f64)
}

/// Per-observation KL loss of a fitted method on the complete cases, against
/// the true success probabilities.
pub fn evaluate_method(rep: &Replication, fit: &BaselineResult) -> Result<f64> {
    let rows = rep.complete_cases();
    let theta_hat = fit.linear_predictor(&rep.data, &rows)?;
    let mu = DVector::from_iterator(rows.len(), rows.iter().map(|&i| rep.p_true[i]));
    Ok(kl_loss(&theta_hat, KlTruth::Mean(&mu), &ExponentialFamily::binomial())?.per_observation())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    /// Per-observation KL by method, None where the method failed.
    pub kl: Vec<Option<f64>>,
    pub n_1: usize,
    pub cc_fraction: f64,
    pub patterns: usize,
    pub attempts: u64,
    /// KKT residual of optimized weights, for the methods that have them.
    pub kkt: Vec<Option<f64>>,
}

fn run_replication(cfg: &SimConfig, rep: usize, settings: &MethodSettings) -> RepOutcome {
    let m = cfg.methods.len();
    let failed = |attempts| RepOutcome {
        rep,
        kl: vec![None; m],
        n_1: 0,
        cc_fraction: f64::NAN,
        patterns: 0,
        attempts,
        kkt: vec![None; m],
    };
    let r = match generate_replication(cfg, rep) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{e}");
            return failed(MAX_ATTEMPTS);
        }
    };
    let n_1 = r.complete_cases().len();
    let patterns = PatternIndex::build(&r.data, PatternOrder::SizeDescending)
        .map(|ix| ix.len())
        .unwrap_or(0);
    let mut settings = settings.clone();
    settings.glasso.seed = cfg.seed ^ ((rep as u64) << 16);
    if settings.groups.is_empty() {
        settings.groups = BLOCKS.iter().map(|b| b.clone().map(|j| j - 1).collect()).collect();
    }
    let fits = match fit_methods(&r.data, &ExponentialFamily::binomial(), &cfg.methods, &settings) {
        Ok(f) => f,
        Err(e) => {
            log::warn!("replication {rep}: {e}");
            return failed(r.attempts);
        }
    };
    let mut kl = Vec::with_capacity(m);
    let mut kkt = Vec::with_capacity(m);
    for (method, fit) in fits {
        let value = fit.as_ref().ok().and_then(|f| match evaluate_method(&r, f) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("replication {rep}, {method}: {e}");
                None
            }
        });
        kl.push(value);
        kkt.push(fit.ok().and_then(|f| f.metadata.kkt_residual));
    }
    RepOutcome {
        rep,
        kl,
        n_1,
        cc_fraction: n_1 as f64 / cfg.n as f64,
        patterns,
        attempts: r.attempts,
        kkt,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub mean: Option<f64>,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub outcomes: Vec<RepOutcome>,
    pub summary: Vec<MethodSummary>,
}

impl SimResult {
    pub fn per_rep_kl(&self) -> Vec<Vec<Option<f64>>> {
        self.outcomes.iter().map(|o| o.kl.clone()).collect()
    }

    pub fn cc_fraction_per_rep(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.cc_fraction).collect()
    }

    pub fn summary_for(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }

    pub fn median(&self, m: Method) -> Option<f64> {
        self.summary_for(m).and_then(|s| s.median)
    }

    /// Writes one row per replication, one KL column per method.
    pub fn write_kl_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["rep".to_string(), "n_1".into(), "cc_fraction".into(), "attempts".into()];
        header.extend(self.config.methods.iter().map(|m| m.to_string()));
        out.write_record(&header).map_err(csv_err)?;
        for o in &self.outcomes {
            let mut rec = vec![
                o.rep.to_string(),
                o.n_1.to_string(),
                format_num(o.cc_fraction),
                o.attempts.to_string(),
            ];
            rec.extend(o.kl.iter().map(|v| v.map(format_num).unwrap_or_else(|| "NA".into())));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        write_summary_csv(&self.summary, w)
    }
}

pub fn write_summary_csv<W: Write>(summary: &[MethodSummary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "median", "q1", "q3", "mean", "ok", "failed"])
        .map_err(csv_err)?;
    let f = |v: Option<f64>| v.map(format_num).unwrap_or_else(|| "NA".into());
    for s in summary {
        out.write_record([
            s.method.to_string(),
            f(s.median),
            f(s.q1),
            f(s.q3),
            f(s.mean),
            s.ok.to_string(),
            s.failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(methods: &[Method], outcomes: &[RepOutcome]) -> Vec<MethodSummary> {
    methods
        .iter()
        .enumerate()
        .map(|(c, &method)| {
            let mut v: Vec<f64> = outcomes.iter().filter_map(|o| o.kl[c]).collect();
            v.sort_by(f64::total_cmp);
            let failed = outcomes.len() - v.len();
            let q = |x| (!v.is_empty()).then(|| quantile(&v, x));
            MethodSummary {
                method,
                median: q(0.5),
                q1: q(0.25),
                q3: q(0.75),
                mean: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
                ok: v.len(),
                failed,
            }
        })
        .collect()
}

/// Runs every replication; results are ordered by replication index.
pub fn run_study(cfg: &SimConfig) -> Result<SimResult> {
    run_study_with(cfg, &MethodSettings::default())
}

pub fn run_study_with(cfg: &SimConfig, settings: &MethodSettings) -> Result<SimResult> {
    cfg.validate()?;
    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, settings))
        .collect();
    let summary = summarize(&cfg.methods, &outcomes);
    Ok(SimResult {
        config: cfg.clone(),
        outcomes,
        summary,
    })
}

/// KL loss of the selected weights relative to the best achievable over the
/// simplex for the same candidates (the infimum is found by minimizing the
/// criterion with the response replaced by the true means and no penalty).
pub fn optimality_ratio(rep: &Replication, lambda: LambdaMode, opts: &OptOptions) -> Result<f64> {
    let fam = ExponentialFamily::binomial();
    let index = PatternIndex::build(&rep.data, PatternOrder::SizeDescending)?;
    let cands = fit_candidates(&rep.data, &index, &fam, &Default::default())?;
    let (ctx, _) = weighting_context(&rep.data, &index, &cands, &fam)?;
    let rows = index.s_set(0);
    let mu = DVector::from_iterator(rows.len(), rows.iter().map(|&i| rep.p_true[i]));

    let kl_at =
        |w: &WeightVector| -> Result<f64> { Ok(kl_loss(&ctx.theta(w.as_vector()), KlTruth::Mean(&mu), &fam)?.total) };
    let lambda_n = LambdaChoice::Mode(lambda).resolve(ctx.n_1());
    let chosen = optimize_weights(&ctx, lambda_n, opts)?;
    let oracle_ctx = ctx.with_response(mu.clone())?;
    let best = optimize_weights(&oracle_ctx, 0.0, opts)?;
    let kl_best = kl_at(&best.weights)?;
    Ok(kl_at(&chosen.weights)? / kl_best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(n: usize, rho: f64) -> SimConfig {
        SimConfig::new(n, rho, BetaCase::Decay, 2, 17)
    }

    #[test]
    fn beta_cases() {
        let d = BetaCase::Decay.beta(14);
        assert_abs_diff_eq!(d[0], 0.4);
        assert_abs_diff_eq!(d[13], 0.4 / 14.0);
        assert!(BetaCase::Flat.beta(14).iter().all(|&b| b == 0.1));
        let r = BetaCase::Rise.beta(14);
        assert_abs_diff_eq!(r[0], 0.2 / 14.0);
        assert_abs_diff_eq!(r[13], 0.2);
    }

    #[test]
    fn availability_follows_lead_covariates() {
        let c = cfg(500, 0.6);
        let r = draw_replication(&c, 0, 0).unwrap();
        assert_eq!(r.data.p(), 13);
        for i in 0..r.data.n() {
            assert!(r.data.is_observed(i, 0));
            for block in &BLOCKS {
                let lead = block.start() - 1;
                let seen = r.data.is_observed(i, lead);
                for j in block.clone() {
                    assert_eq!(r.data.is_observed(i, j - 1), seen);
                }
                if seen {
                    assert!(r.data.value(i, lead).unwrap() < 1.0);
                }
            }
        }
        let index = PatternIndex::build(&r.data, PatternOrder::SizeDescending).unwrap();
        assert_eq!(index.len(), 8);
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let c = cfg(50, 0.3);
        let a = draw_replication(&c, 3, 0).unwrap();
        let b = draw_replication(&c, 3, 0).unwrap();
        let other = draw_replication(&c, 4, 0).unwrap();
        assert_eq!(a.theta_true, b.theta_true);
        assert_ne!(a.theta_true, other.theta_true);
    }

    #[test]
    fn independent_blocks_at_zero_correlation() {
        let f = cc_fraction_draw(100_000, 0.0, 5).unwrap();
        assert!((f - 0.125).abs() < 0.006, "{f}");
        assert_abs_diff_eq!(cc_fraction_theory(0.0), 0.125);
    }

    #[test]
    fn equicorrelation_covariance() {
        let c = SimConfig::new(100_000, 0.6, BetaCase::Flat, 1, 2);
        let mut rng = stream_rng(c.seed, 0, 0);
        // same construction as the generator, without masking
        let (a, b) = (0.6f64.sqrt(), 0.4f64.sqrt());
        let m = 4;
        let mut sum = [0.0; 4];
        let mut cross = [[0.0; 4]; 4];
        for _ in 0..c.n {
            let z0: f64 = rng.sample(StandardNormal);
            let x: Vec<f64> = (0..m)
                .map(|_| 1.0 + a * z0 + b * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for j in 0..m {
                sum[j] += x[j];
                for k in 0..m {
                    cross[j][k] += x[j] * x[k];
                }
            }
        }
        let n = c.n as f64;
        for j in 0..m {
            for k in 0..m {
                let cov = cross[j][k] / n - sum[j] / n * sum[k] / n;
                let target = if j == k { 1.0 } else { 0.6 };
                assert!((cov - target).abs() < 0.02, "cov[{j}][{k}] = {cov}");
            }
        }
    }

    #[test]
    fn oracle_predictor_has_zero_kl() {
        let c = cfg(400, 0.3);
        let r = generate_replication(&c, 0).unwrap();
        let rows = r.complete_cases();
        let t = DVector::from_iterator(rows.len(), rows.iter().map(|&i| r.theta_true[i]));
        let mu = DVector::from_iterator(rows.len(), rows.iter().map(|&i| r.p_true[i]));
        let kl = kl_loss(&t, KlTruth::Mean(&mu), &ExponentialFamily::binomial()).unwrap();
        assert!(kl.per_observation().abs() <= 1e-12);
    }

    #[test]
    fn constant_half_matches_hand_loop() {
        let c = cfg(400, 0.6);
        let r = generate_replication(&c, 1).unwrap();
        let rows = r.complete_cases();
        let fit = BaselineResult {
            method: Method::Cc,
            family: ExponentialFamily::binomial(),
            beta_effective: DVector::zeros(13),
            support: vec![0],
            impute_zero: false,
            weights: None,
            metadata: Default::default(),
        };
        let got = evaluate_method(&r, &fit).unwrap();
        let mut oracle = 0.0;
        for &i in &rows {
            let m = r.p_true[i];
            oracle += 2.0 * (m * (m / 0.5).ln() + (1.0 - m) * ((1.0 - m) / 0.5).ln());
        }
        assert_abs_diff_eq!(got, oracle / rows.len() as f64, epsilon = 1e-12);
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile(&v, 0.5), 2.5);
        assert_abs_diff_eq!(quantile(&v, 0.25), 1.75);
        assert_abs_diff_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn study_is_reproducible() {
        let mut c = SimConfig::new(400, 0.3, BetaCase::Decay, 2, 11);
        c.methods = vec![Method::Opt1, Method::Cc, Method::Saic];
        let a = run_study(&c).unwrap();
        let b = run_study(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outcomes.len(), 2);
        assert!(a.outcomes.iter().flat_map(|o| o.kl.iter()).all(|v| v.unwrap() >= 0.0));

        c.reps = 1;
        let one = run_study(&c).unwrap();
        for (k, s) in one.summary.iter().enumerate() {
            assert_eq!(s.median, one.outcomes[0].kl[k]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(10, 0.3, BetaCase::Decay, 1, 0).validate().is_err());
        assert!(SimConfig::new(400, 1.0, BetaCase::Decay, 1, 0).validate().is_err());
        assert!(SimConfig::new(400, 0.9, BetaCase::Decay, 1, 0).validate().is_ok());
    }
}

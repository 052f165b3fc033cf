//! Train/test comparison of several methods on one dataset.
//!
//! Test subjects that observe every covariate of the training data's first
//! pattern are predicted by the methods fitted on the full training data.
//! For any other availability pattern D*, the training data are restricted to
//! D* and every method is refitted there before predicting.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::averaging::{kl_loss, KlTruth};
use crate::baselines::{fit_methods, BaselineResult, Method, MethodSettings};
use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};
use crate::family::ExponentialFamily;
use crate::io::ColumnGroup;
use crate::patterns::{restrict_to, PatternIndex, PatternOrder};

/// Splits subjects into train and test. With `stratify`, a `train_frac`
/// share of every availability pattern goes to training.
pub fn split_rows(
    data: &FragmentaryDataset,
    train_frac: f64,
    stratify: bool,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split fraction must be in (0, 1), got {train_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata: Vec<Vec<usize>> = if stratify {
        let index = PatternIndex::build(data, PatternOrder::SizeDescending)?;
        (0..index.len()).map(|k| index.t_set(k).to_vec()).collect()
    } else {
        vec![(0..data.n()).collect()]
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut s in strata {
        s.shuffle(&mut rng);
        let cut = (s.len() as f64 * train_frac).round() as usize;
        train.extend_from_slice(&s[..cut]);
        test.extend_from_slice(&s[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    /// Position of the subject in the test data.
    pub row: usize,
    pub method: Method,
    /// Names of the columns the subject observes.
    pub pattern: String,
    pub restricted: bool,
    pub theta: Option<f64>,
    pub mean: Option<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub method: Method,
    pub predicted: usize,
    pub failed: usize,
    /// KL loss with the observed response in place of the true mean.
    pub kl_total: f64,
    pub kl_per_obs: f64,
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub predictions: Vec<PredictionRow>,
    pub summary: Vec<CompareSummary>,
    /// Fits on the unrestricted training data.
    pub fits: Vec<(Method, Option<BaselineResult>)>,
}

fn groups_for(data: &FragmentaryDataset, groups: &[ColumnGroup]) -> Vec<Vec<usize>> {
    groups
        .iter()
        .map(|g| {
            g.columns
                .iter()
                .filter_map(|c| data.column_index(c))
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect()
}

/// Fits `methods` on `train` and predicts every subject of `test`. The two
/// datasets must share column names.
pub fn compare(
    train: &FragmentaryDataset,
    test: &FragmentaryDataset,
    family: &ExponentialFamily,
    methods: &[Method],
    groups: &[ColumnGroup],
    settings: &MethodSettings,
) -> Result<CompareResult> {
    if train.column_names() != test.column_names() {
        return Err(Error::InvalidInput("train and test columns differ".into()));
    }
    let mut base_settings = settings.clone();
    base_settings.groups = groups_for(train, groups);
    let base = fit_methods(train, family, methods, &base_settings)?;
    let index = PatternIndex::build(train, settings.averaging.order)?;
    let delta_1 = index.pattern(0).indices.clone();

    // test rows by availability pattern
    let mut by_pattern: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for i in 0..test.n() {
        by_pattern.entry(test.observed_set(i)).or_default().push(i);
    }

    let mut predictions = Vec::new();
    for (cols, rows) in &by_pattern {
        let covers = delta_1.iter().all(|j| cols.contains(j));
        let pattern_name = cols
            .iter()
            .map(|&j| test.column_names()[j].as_str())
            .collect::<Vec<_>>()
            .join("|");
        // (fit, column map into the fit's dataset)
        let fits: Vec<(Method, Result<BaselineResult>)>;
        let col_map: Vec<usize>;
        if covers {
            fits = base
                .iter()
                .map(|(m, r)| (*m, r.as_ref().cloned().map_err(copy_err)))
                .collect();
            col_map = (0..train.p()).collect();
        } else {
            let restricted = restrict_to(train, cols)?;
            let mut s = settings.clone();
            s.groups = groups_for(&restricted, groups);
            fits = match fit_methods(&restricted, family, methods, &s) {
                Ok(f) => f,
                Err(e) => methods.iter().map(|&m| (m, Err(copy_err(&e)))).collect(),
            };
            col_map = cols.clone();
        }
        for (m, fit) in &fits {
            for &i in rows {
                let x: Vec<Option<f64>> = col_map.iter().map(|&j| test.value(i, j)).collect();
                let pred = fit.as_ref().ok().and_then(|f| f.predict(&x).ok());
                predictions.push(PredictionRow {
                    row: i,
                    method: *m,
                    pattern: pattern_name.clone(),
                    restricted: !covers,
                    theta: pred.map(|p| p.theta),
                    mean: pred.map(|p| p.mean),
                    y: test.y()[i],
                });
            }
        }
    }
    predictions.sort_by_key(|p| (methods.iter().position(|m| *m == p.method), p.row));

    let summary = methods
        .iter()
        .map(|&m| {
            let rows: Vec<&PredictionRow> = predictions.iter().filter(|p| p.method == m).collect();
            let ok: Vec<&&PredictionRow> = rows.iter().filter(|p| p.theta.is_some()).collect();
            let theta = DVector::from_iterator(ok.len(), ok.iter().map(|p| p.theta.unwrap_or(0.0)));
            let y = DVector::from_iterator(ok.len(), ok.iter().map(|p| p.y));
            let total = if ok.is_empty() {
                f64::NAN
            } else {
                kl_loss(&theta, KlTruth::Mean(&y), family)?.total
            };
            Ok(CompareSummary {
                method: m,
                predicted: ok.len(),
                failed: rows.len() - ok.len(),
                kl_total: total,
                kl_per_obs: total / ok.len().max(1) as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let fits = base.into_iter().map(|(m, r)| (m, r.ok())).collect();
    Ok(CompareResult {
        predictions,
        summary,
        fits,
    })
}

fn copy_err(e: &Error) -> Error {
    if e.is_input_error() {
        Error::InvalidInput(e.to_string())
    } else {
        Error::NoCandidate(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn stratified_split_covers_every_pattern() {
        let (data, _) = fixtures::adni_like(0.2, 1);
        let (train, test) = split_rows(&data, 0.75, true, 3).unwrap();
        assert_eq!(train.len() + test.len(), data.n());
        let index = PatternIndex::build(&data, PatternOrder::SizeDescending).unwrap();
        for k in 0..index.len() {
            let t = index.t_set(k);
            let in_train = t.iter().filter(|i| train.contains(i)).count();
            assert_eq!(in_train, (t.len() as f64 * 0.75).round() as usize);
        }
        assert_eq!(split_rows(&data, 0.75, true, 3).unwrap(), (train, test));
    }
}

//! Deterministic datasets used by tests, examples and the CLI test-suite.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::FragmentaryDataset;
use crate::family::sigmoid;
use crate::io::ColumnGroup;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("X{j}")).collect()
}

/// Availability layout of the 10-subject, 8-covariate illustration (1-based columns).
pub const TOY_AVAILABILITY: [&[usize]; 10] = [
    &[1, 2, 3, 4, 5, 6, 7, 8],
    &[1, 2, 3, 4, 5, 6, 7, 8],
    &[1, 2, 3],
    &[1, 2, 3, 7, 8],
    &[1, 4, 5, 6],
    &[1, 4, 5, 6],
    &[1],
    &[1, 5, 7, 8],
    &[1, 2, 7, 8],
    &[1, 2, 7, 8],
];

/// The 10 × 8 toy dataset with gaussian responses; values are arbitrary but fixed.
pub fn toy_ten() -> FragmentaryDataset {
    let mut r = rng(1);
    let rows: Vec<Vec<Option<f64>>> = TOY_AVAILABILITY
        .iter()
        .map(|avail| {
            (1..=8)
                .map(|j| {
                    let v: f64 = r.sample(StandardNormal);
                    avail.contains(&j).then_some(v)
                })
                .collect()
        })
        .collect();
    let y = (0..10).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    FragmentaryDataset::from_rows(y, &rows, names(8)).expect("valid fixture")
}

/// Fully observed gaussian data: intercept plus p − 1 standard normal columns.
pub fn complete_gaussian(n: usize, p: usize, seed: u64) -> FragmentaryDataset {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { r.sample(StandardNormal) });
    let beta = DVector::from_fn(p, |j, _| 1.0 / (j as f64 + 1.0));
    let noise = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = &x * beta + noise;
    FragmentaryDataset::complete(y, x, names(p)).expect("valid fixture")
}

/// Dense logistic design with an intercept column; coefficients are drawn
/// uniformly in ±`scale`/√p.
pub fn logistic_problem(n: usize, p: usize, scale: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { r.sample(StandardNormal) });
    let beta = DVector::from_fn(p, |_, _| scale * (2.0 * r.random::<f64>() - 1.0) / (p as f64).sqrt());
    let eta = &x * beta;
    let y = eta.map(|t| if r.random::<f64>() < sigmoid(t) { 1.0 } else { 0.0 });
    (x, y)
}

pub fn poisson_problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, j| {
        if j == 0 {
            1.0
        } else {
            0.5 * r.sample::<f64, _>(StandardNormal)
        }
    });
    let beta = DVector::from_fn(p, |j, _| if j == 0 { 1.0 } else { 0.3 });
    let eta = &x * beta;
    let y = eta.map(|t| {
        // inversion sampling is fine for the small means used here
        let lambda = t.exp();
        let u: f64 = r.random();
        let (mut k, mut pk, mut cdf) = (0.0, (-lambda).exp(), (-lambda).exp());
        while u > cdf && k < 1000.0 {
            k += 1.0;
            pk *= lambda / k;
            cdf += pk;
        }
        k
    });
    (x, y)
}

/// Random availability mask over p columns with each cell observed with
/// probability `obs_prob`; rows that would be empty observe one random column.
pub fn random_masked(n: usize, p: usize, obs_prob: f64, seed: u64) -> FragmentaryDataset {
    let mut r = rng(seed);
    let rows: Vec<Vec<Option<f64>>> = (0..n)
        .map(|_| {
            let mut row: Vec<Option<f64>> = (0..p)
                .map(|_| {
                    let v: f64 = r.sample(StandardNormal);
                    (r.random::<f64>() < obs_prob).then_some(v)
                })
                .collect();
            if row.iter().all(Option::is_none) {
                let j = r.random_range(0..p);
                row[j] = Some(r.sample(StandardNormal));
            }
            row
        })
        .collect();
    let y = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    FragmentaryDataset::from_rows(y, &rows, names(p)).expect("valid fixture")
}

/// Source blocks of the ADNI-shaped fixture, in column order after the intercept.
pub const ADNI_BLOCKS: [(&str, usize); 4] = [("CSF", 3), ("PET", 10), ("MRI", 10), ("GENE", 10)];

/// (CSF, PET, MRI, GENE) availability and sample size of the eight patterns.
pub const ADNI_PATTERNS: [([bool; 4], usize); 8] = [
    ([true, true, true, true], 409),
    ([true, true, true, false], 368),
    ([true, true, false, true], 40),
    ([false, true, true, true], 105),
    ([false, true, false, true], 86),
    ([false, true, true, false], 53),
    ([false, false, false, true], 53),
    ([false, false, true, false], 56),
];

/// Synthetic binary-response data with the ADNI pattern/sample-size structure:
/// an intercept plus four blocks, pattern sizes scaled by `scale` (at least one
/// subject per pattern). Returns the data and its column groups.
pub fn adni_like(scale: f64, seed: u64) -> (FragmentaryDataset, Vec<ColumnGroup>) {
    let mut r = rng(seed);
    let mut col_names = vec!["intercept".to_string()];
    let mut groups = Vec::new();
    let mut block_cols = Vec::new();
    for (name, size) in ADNI_BLOCKS {
        let start = col_names.len();
        let cols: Vec<String> = (1..=size).map(|j| format!("{name}_{j}")).collect();
        col_names.extend(cols.iter().cloned());
        block_cols.push(start..start + size);
        groups.push(ColumnGroup {
            name: name.to_string(),
            columns: cols,
        });
    }
    let p = col_names.len();
    let beta: Vec<f64> = (0..p)
        .map(|j| {
            if j == 0 {
                -0.3
            } else {
                // a couple of informative columns per block, the rest weak
                let pos = block_cols
                    .iter()
                    .find(|b| b.contains(&j))
                    .map(|b| j - b.start)
                    .unwrap_or(0);
                match pos {
                    0 => 0.6,
                    1 => -0.4,
                    _ => 0.05,
                }
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (avail, size) in ADNI_PATTERNS {
        let count = ((size as f64 * scale).round() as usize).max(1);
        for _ in 0..count {
            let latent: f64 = r.sample(StandardNormal);
            let full: Vec<f64> = (0..p)
                .map(|j| {
                    if j == 0 {
                        1.0
                    } else {
                        0.5 * latent + r.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            let eta: f64 = full.iter().zip(&beta).map(|(x, b)| x * b).sum();
            y.push(if r.random::<f64>() < sigmoid(eta) { 1.0 } else { 0.0 });
            let row = (0..p)
                .map(|j| {
                    let observed = j == 0 || block_cols.iter().zip(avail).any(|(b, a)| a && b.contains(&j));
                    observed.then_some(full[j])
                })
                .collect();
            rows.push(row);
        }
    }
    let data = FragmentaryDataset::from_rows(y, &rows, col_names).expect("valid fixture");
    (data, groups)
}

//! Marginal correlation screening within column groups.

use serde::Serialize;

use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};
use crate::io::ColumnGroup;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenedColumn {
    pub column: String,
    /// |Pearson r| with the response over subjects observing the column.
    pub abs_corr: f64,
    pub n_obs: usize,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScreen {
    pub group: String,
    /// Columns by decreasing |r|.
    pub columns: Vec<ScreenedColumn>,
}

/// Pearson correlation over the pairs where `x` is observed. None with fewer
/// than two pairs; zero when either side is constant.
pub fn pairwise_correlation(x: &[Option<f64>], y: &[f64]) -> Option<(f64, usize)> {
    let pairs: Vec<(f64, f64)> = x.iter().zip(y).filter_map(|(a, &b)| a.map(|a| (a, b))).collect();
    let n = pairs.len();
    if n < 2 {
        return None;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Some((0.0, n));
    }
    Some((sxy / (sxx * syy).sqrt(), n))
}

/// Keeps the `keep` columns of each group with the largest |r|; columns in
/// no group pass through unchanged.
pub fn screen(
    data: &FragmentaryDataset,
    groups: &[ColumnGroup],
    keep: usize,
) -> Result<(FragmentaryDataset, Vec<GroupScreen>)> {
    let y: Vec<f64> = data.y().iter().copied().collect();
    let mut drop = vec![false; data.p()];
    let mut report = Vec::with_capacity(groups.len());
    for g in groups {
        let mut cols = Vec::with_capacity(g.columns.len());
        for name in &g.columns {
            let j = data
                .column_index(name)
                .ok_or_else(|| Error::InvalidInput(format!("group '{}' names unknown column '{name}'", g.name)))?;
            let x: Vec<Option<f64>> = (0..data.n()).map(|i| data.value(i, j)).collect();
            let (r, n_obs) = pairwise_correlation(&x, &y).ok_or_else(|| Error::NoOverlap { column: name.clone() })?;
            cols.push((
                j,
                ScreenedColumn {
                    column: name.clone(),
                    abs_corr: r.abs(),
                    n_obs,
                    kept: false,
                },
            ));
        }
        cols.sort_by(|a, b| b.1.abs_corr.total_cmp(&a.1.abs_corr));
        for (rank, (j, c)) in cols.iter_mut().enumerate() {
            c.kept = rank < keep;
            drop[*j] = !c.kept;
        }
        report.push(GroupScreen {
            group: g.name.clone(),
            columns: cols.into_iter().map(|(_, c)| c).collect(),
        });
    }
    let kept: Vec<usize> = (0..data.p()).filter(|&j| !drop[j]).collect();
    let rows: Vec<Vec<Option<f64>>> = (0..data.n())
        .map(|i| kept.iter().map(|&j| data.value(i, j)).collect())
        .collect();
    let names = kept.iter().map(|&j| data.column_names()[j].clone()).collect();
    let reduced = FragmentaryDataset::from_rows(y, &rows, names)?;
    Ok((reduced, report))
}

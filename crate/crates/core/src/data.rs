//! The fragmentary dataset: a response vector plus a covariate matrix in which
//! each cell is either observed or unavailable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Payload written into unobserved cells in debug builds. It is a signaling
/// NaN, so any arithmetic that reads a masked cell poisons its result.
#[cfg(debug_assertions)]
pub(crate) const POISON: f64 = f64::from_bits(0x7FF4_0000_0000_0001);

#[derive(Debug, Clone)]
pub struct FragmentaryDataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    /// Row-major n × p availability mask.
    mask: Vec<bool>,
    column_names: Vec<String>,
}

impl FragmentaryDataset {
    /// Builds a dataset, validating the availability invariants. Cells whose
    /// mask entry is false are never read afterwards.
    pub fn new(y: DVector<f64>, mut x: DMatrix<f64>, mask: Vec<bool>, column_names: Vec<String>) -> Result<Self> {
        let n = y.len();
        let p = column_names.len();
        if n == 0 || p == 0 {
            return Err(Error::EmptyDataset);
        }
        if x.nrows() != n || x.ncols() != p || mask.len() != n * p {
            return Err(Error::InvalidInput(format!(
                "shape mismatch: y has {n} rows, x is {}x{}, mask has {} cells, {p} column names",
                x.nrows(),
                x.ncols(),
                mask.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "response is missing or non-finite at subject {i}"
            )));
        }
        for i in 0..n {
            let row = &mask[i * p..(i + 1) * p];
            if !row.iter().any(|&m| m) {
                return Err(Error::EmptySubject { subject: i });
            }
            for (j, &m) in row.iter().enumerate() {
                if m {
                    if !x[(i, j)].is_finite() {
                        return Err(Error::InvalidInput(format!("observed cell ({i}, {j}) is not finite")));
                    }
                } else {
                    #[cfg(debug_assertions)]
                    {
                        x[(i, j)] = POISON;
                    }
                    #[cfg(not(debug_assertions))]
                    {
                        x[(i, j)] = 0.0;
                    }
                }
            }
        }
        Ok(Self {
            y,
            x,
            mask,
            column_names,
        })
    }

    /// Convenience constructor from rows of optional values.
    pub fn from_rows(y: Vec<f64>, rows: &[Vec<Option<f64>>], column_names: Vec<String>) -> Result<Self> {
        let n = rows.len();
        let p = column_names.len();
        if y.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} responses for {n} covariate rows",
                y.len()
            )));
        }
        let mut x = DMatrix::zeros(n, p);
        let mut mask = vec![false; n * p];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("expected {p} covariates, found {}", row.len()),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    x[(i, j)] = *v;
                    mask[i * p + j] = true;
                }
            }
        }
        Self::new(DVector::from_vec(y), x, mask, column_names)
    }

    /// A fully observed dataset.
    pub fn complete(y: DVector<f64>, x: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        let mask = vec![true; x.nrows() * x.ncols()];
        Self::new(y, x, mask, column_names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.column_names.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.p() + j]
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.is_observed(i, j).then(|| self.x[(i, j)])
    }

    /// Observed covariate indices of subject `i` (its D_i), ascending.
    pub fn observed_set(&self, i: usize) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.is_observed(i, j)).collect()
    }

    pub fn observes_all(&self, i: usize, cols: &[usize]) -> bool {
        cols.iter().all(|&j| self.is_observed(i, j))
    }

    pub fn row(&self, i: usize) -> Vec<Option<f64>> {
        (0..self.p()).map(|j| self.value(i, j)).collect()
    }

    /// Design submatrix over `rows` × `cols`. Every requested cell must be observed.
    pub fn design(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
            let (i, j) = (rows[r], cols[c]);
            debug_assert!(self.is_observed(i, j), "read of masked cell ({i}, {j})");
            self.x[(i, j)]
        })
    }

    pub fn response(&self, rows: &[usize]) -> DVector<f64> {
        DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]))
    }

    /// Full n × p matrix with unavailable cells replaced by zero.
    pub fn zero_imputed(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.p(), |i, j| self.value(i, j).unwrap_or(0.0))
    }

    pub fn missing_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Keeps the given subjects (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let rows_data: Vec<Vec<Option<f64>>> = rows.iter().map(|&i| self.row(i)).collect();
        Self::from_rows(
            rows.iter().map(|&i| self.y[i]).collect(),
            &rows_data,
            self.column_names.clone(),
        )
    }

    /// Prepends an always-observed column of ones.
    pub fn with_intercept(&self, name: &str) -> Result<Self> {
        let rows: Vec<Vec<Option<f64>>> = (0..self.n())
            .map(|i| {
                let mut r = Vec::with_capacity(self.p() + 1);
                r.push(Some(1.0));
                r.extend(self.row(i));
                r
            })
            .collect();
        let mut names = Vec::with_capacity(self.p() + 1);
        names.push(name.to_string());
        names.extend(self.column_names.iter().cloned());
        Self::from_rows(self.y.iter().copied().collect(), &rows, names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn rejects_subject_without_covariates() {
        let rows = vec![vec![Some(1.0), None], vec![None, None]];
        let err = FragmentaryDataset::from_rows(vec![0.0, 1.0], &rows, names(2)).unwrap_err();
        assert!(matches!(err, Error::EmptySubject { subject: 1 }));
    }

    #[test]
    fn rejects_empty() {
        let err = FragmentaryDataset::from_rows(vec![], &[], names(2)).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn rejects_missing_response() {
        let rows = vec![vec![Some(1.0)]];
        assert!(FragmentaryDataset::from_rows(vec![f64::NAN], &rows, names(1)).is_err());
    }

    #[test]
    fn ragged_row_names_the_row() {
        let rows = vec![vec![Some(1.0), Some(2.0)], vec![Some(1.0)]];
        match FragmentaryDataset::from_rows(vec![0.0, 1.0], &rows, names(2)) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[cfg(debug_assertions)]
    #[test]
    fn masked_cells_are_poisoned_in_debug() {
        let rows = vec![vec![Some(1.0), None]];
        let d = FragmentaryDataset::from_rows(vec![0.0], &rows, names(2)).unwrap();
        assert!(d.x[(0, 1)].is_nan());
        assert_eq!(d.value(0, 1), None);
        assert_eq!(d.zero_imputed()[(0, 1)], 0.0);
    }

    #[test]
    fn observed_set_and_intercept() {
        let rows = vec![vec![Some(1.0), None, Some(3.0)]];
        let d = FragmentaryDataset::from_rows(vec![1.0], &rows, names(3)).unwrap();
        assert_eq!(d.observed_set(0), vec![0, 2]);
        let d1 = d.with_intercept("intercept").unwrap();
        assert_eq!(d1.p(), 4);
        assert_eq!(d1.observed_set(0), vec![0, 1, 3]);
        assert_eq!(d1.value(0, 0), Some(1.0));
    }
}

//! Decomposition of a fragmentary dataset into response patterns.
//!
//! A response pattern Δ_k is one of the distinct observed covariate sets. For
//! each pattern the index stores T_k (subjects whose observed set equals Δ_k)
//! and S_k (subjects observing at least Δ_k). Candidate model k is fitted on
//! S_k using the columns of Δ_k, and S_1 of the maximal pattern is the sample
//! on which averaging weights are chosen.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};

/// A response pattern: sorted, non-empty set of covariate column indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pattern {
    /// 1-based position in its index.
    pub id: usize,
    pub indices: Vec<usize>,
}

impl Pattern {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_subset_of(&self, other: &[usize]) -> bool {
        self.indices.iter().all(|j| other.binary_search(j).is_ok())
    }
}

/// How patterns after the first (maximal) one are numbered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternOrder {
    /// Descending size, ties broken lexicographically by index set.
    #[default]
    SizeDescending,
    /// Order of first appearance among subjects.
    FirstAppearance,
}

#[derive(Debug, Clone)]
pub struct PatternIndex {
    patterns: Vec<Pattern>,
    t_sets: Vec<Vec<usize>>,
    s_sets: Vec<Vec<usize>>,
    p: usize,
    /// Subjects grouped by pattern (T_1, then T_2, ...), ingestion order within a group.
    permutation: Vec<usize>,
}

pub fn build_pattern_index(data: &FragmentaryDataset) -> Result<PatternIndex> {
    PatternIndex::build(data, PatternOrder::default())
}

impl PatternIndex {
    pub fn build(data: &FragmentaryDataset, order: PatternOrder) -> Result<Self> {
        let n = data.n();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        // pattern -> (first appearance, members)
        let mut groups: BTreeMap<Vec<usize>, (usize, Vec<usize>)> = BTreeMap::new();
        for i in 0..n {
            let d = data.observed_set(i);
            if d.is_empty() {
                return Err(Error::EmptySubject { subject: i });
            }
            groups.entry(d).or_insert_with(|| (i, Vec::new())).1.push(i);
        }

        let mut entries: Vec<(Vec<usize>, usize, Vec<usize>)> =
            groups.into_iter().map(|(k, (f, t))| (k, f, t)).collect();
        // BTreeMap iteration is already lexicographic; stable sorts keep it for ties.
        entries.sort_by_key(|e| std::cmp::Reverse(e.0.len()));
        if order == PatternOrder::FirstAppearance {
            entries[1..].sort_by_key(|e| e.1);
        }

        let mut patterns = Vec::with_capacity(entries.len());
        let mut t_sets = Vec::with_capacity(entries.len());
        let mut s_sets = Vec::with_capacity(entries.len());
        for (k, (indices, _, t)) in entries.into_iter().enumerate() {
            let s: Vec<usize> = (0..n).filter(|&i| data.observes_all(i, &indices)).collect();
            patterns.push(Pattern { id: k + 1, indices });
            t_sets.push(t);
            s_sets.push(s);
        }
        let permutation = t_sets.iter().flatten().copied().collect();
        Ok(Self {
            patterns,
            t_sets,
            s_sets,
            p: data.p(),
            permutation,
        })
    }

    /// Number of patterns K.
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Number of covariate columns in the indexed dataset.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    /// Pattern by 0-based position.
    pub fn pattern(&self, k: usize) -> &Pattern {
        &self.patterns[k]
    }

    pub fn t_set(&self, k: usize) -> &[usize] {
        &self.t_sets[k]
    }

    pub fn s_set(&self, k: usize) -> &[usize] {
        &self.s_sets[k]
    }

    pub fn n_k(&self, k: usize) -> usize {
        self.s_sets[k].len()
    }

    pub fn p_k(&self, k: usize) -> usize {
        self.patterns[k].len()
    }

    /// True when the first pattern contains every column (complete cases exist).
    pub fn has_full_pattern(&self) -> bool {
        self.patterns[0].len() == self.p
    }

    /// Subject order grouping T_1, T_2, ... contiguously.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// The 0/1 matrix Π_k of size p_k × p.
    pub fn projection(&self, k: usize) -> DMatrix<f64> {
        let idx = &self.patterns[k].indices;
        let mut m = DMatrix::zeros(idx.len(), self.p);
        for (r, &j) in idx.iter().enumerate() {
            m[(r, j)] = 1.0;
        }
        m
    }

    /// Π_k v.
    pub fn project(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        let idx = &self.patterns[k].indices;
        DVector::from_iterator(idx.len(), idx.iter().map(|&j| v[j]))
    }

    /// Π_k^T b: scatters a p_k-vector into p-space.
    pub fn embed(&self, k: usize, b: &DVector<f64>) -> DVector<f64> {
        embed(&self.patterns[k].indices, b, self.p)
    }
}

pub(crate) fn embed(indices: &[usize], b: &DVector<f64>, p: usize) -> DVector<f64> {
    let mut out = DVector::zeros(p);
    for (r, &j) in indices.iter().enumerate() {
        out[j] = b[r];
    }
    out
}

/// Fraction of subjects in the first pattern's S set (the complete cases).
pub fn cc_fraction(index: &PatternIndex, n: usize) -> f64 {
    index.n_k(0) as f64 / n as f64
}

/// Keeps only the `target` columns and drops subjects that observe none of them.
pub fn restrict_to(data: &FragmentaryDataset, target: &[usize]) -> Result<FragmentaryDataset> {
    restrict_to_rows(data, target).map(|(d, _)| d)
}

/// As [`restrict_to`], also returning the original indices of the kept subjects.
pub fn restrict_to_rows(data: &FragmentaryDataset, target: &[usize]) -> Result<(FragmentaryDataset, Vec<usize>)> {
    if target.is_empty() {
        return Err(Error::InvalidInput("restriction target is empty".into()));
    }
    let mut cols = target.to_vec();
    cols.sort_unstable();
    cols.dedup();
    if let Some(&j) = cols.iter().find(|&&j| j >= data.p()) {
        return Err(Error::InvalidInput(format!(
            "restriction column {j} out of range (p = {})",
            data.p()
        )));
    }
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    for i in 0..data.n() {
        let row: Vec<Option<f64>> = cols.iter().map(|&j| data.value(i, j)).collect();
        if row.iter().any(Option::is_some) {
            kept.push(i);
            rows.push(row);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let names = cols.iter().map(|&j| data.column_names()[j].clone()).collect();
    let y = kept.iter().map(|&i| data.y()[i]).collect();
    let restricted = FragmentaryDataset::from_rows(y, &rows, names)?;
    Ok((restricted, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn one_based(v: &[usize]) -> Vec<usize> {
        v.iter().map(|i| i + 1).collect()
    }

    #[test]
    fn toy_first_appearance_sets() {
        let d = fixtures::toy_ten();
        let idx = PatternIndex::build(&d, PatternOrder::FirstAppearance).unwrap();
        assert_eq!(idx.len(), 7);
        assert_eq!(one_based(idx.t_set(0)), vec![1, 2]);
        assert_eq!(one_based(idx.s_set(0)), vec![1, 2]);
        assert_eq!(one_based(idx.t_set(1)), vec![3]);
        assert_eq!(one_based(idx.s_set(1)), vec![1, 2, 3, 4]);
        assert_eq!(one_based(idx.t_set(6)), vec![9, 10]);
        assert_eq!(one_based(idx.s_set(6)), vec![1, 2, 4, 9, 10]);
        assert_eq!(one_based(&idx.pattern(1).indices), vec![1, 2, 3]);
        assert_eq!(one_based(&idx.pattern(6).indices), vec![1, 2, 7, 8]);
    }

    #[test]
    fn default_order_is_size_then_lex() {
        let d = fixtures::toy_ten();
        let idx = build_pattern_index(&d).unwrap();
        let sizes: Vec<usize> = (0..idx.len()).map(|k| idx.p_k(k)).collect();
        assert_eq!(sizes, vec![8, 5, 4, 4, 4, 3, 1]);
        assert_eq!(one_based(&idx.pattern(2).indices), vec![1, 2, 7, 8]);
        assert_eq!(one_based(&idx.pattern(3).indices), vec![1, 4, 5, 6]);
        assert_eq!(one_based(&idx.pattern(4).indices), vec![1, 5, 7, 8]);
        // same sets keyed by content
        assert_eq!(one_based(idx.s_set(2)), vec![1, 2, 4, 9, 10]);
        assert_eq!(idx.permutation().len(), 10);
    }

    #[test]
    fn fully_observed_has_one_pattern() {
        let d = fixtures::complete_gaussian(12, 3, 5);
        let idx = build_pattern_index(&d).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.t_set(0), (0..12).collect::<Vec<_>>().as_slice());
        assert_eq!(idx.s_set(0), idx.t_set(0));
        assert!(idx.has_full_pattern());
        assert_eq!(cc_fraction(&idx, 12), 1.0);
    }

    #[test]
    fn restrict_identity_and_single_column() {
        let d = fixtures::toy_ten();
        let same = restrict_to(&d, &(0..8).collect::<Vec<_>>()).unwrap();
        assert_eq!(same.n(), d.n());
        for i in 0..d.n() {
            assert_eq!(same.row(i), d.row(i));
        }
        let x1 = restrict_to(&d, &[0]).unwrap();
        let idx = build_pattern_index(&x1).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.t_set(0).len(), 10);
    }

    #[test]
    fn restrict_drops_empty_subjects() {
        let d = fixtures::toy_ten();
        // X_4 is observed by the complete cases and subjects 5, 6
        let (r, kept) = restrict_to_rows(&d, &[3]).unwrap();
        assert_eq!(r.n(), 4);
        assert_eq!(kept, vec![0, 1, 4, 5]);
        assert!(restrict_to(&d, &[]).is_err());
    }

    #[test]
    fn projection_embed_roundtrip() {
        let d = fixtures::toy_ten();
        let idx = build_pattern_index(&d).unwrap();
        let v = DVector::from_fn(8, |j, _| j as f64 * 1.5 - 2.0);
        for k in 0..idx.len() {
            let a = idx.projection(k) * &v;
            assert_eq!(a, idx.project(k, &v));
            let back = idx.embed(k, &a);
            for j in 0..8 {
                let expect = if idx.pattern(k).indices.contains(&j) { v[j] } else { 0.0 };
                assert_eq!(back[j], expect);
            }
        }
    }
}

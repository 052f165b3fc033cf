use nalgebra::{DMatrix, DVector};

/// Numerical rank of `x` by Householder QR with column pivoting. Columns whose
/// pivot falls below `rel_tol` times the leading pivot are reported dependent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RankReport {
    pub rank: usize,
    pub dependent: Vec<usize>,
}

pub(crate) fn pivoted_rank(x: &DMatrix<f64>, rel_tol: f64) -> RankReport {
    let (n, p) = x.shape();
    let mut a = x.clone();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut lead = 0.0;
    let mut rank = 0;
    for step in 0..p.min(n) {
        // pick the remaining column with the largest trailing norm
        let (best, best_norm) = (step..p)
            .map(|c| (c, a.view((step, c), (n - step, 1)).norm()))
            .fold((step, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if step == 0 {
            lead = best_norm;
        }
        if best_norm <= rel_tol * lead || best_norm == 0.0 {
            break;
        }
        a.swap_columns(step, best);
        perm.swap(step, best);

        let mut v: DVector<f64> = a.view((step, step), (n - step, 1)).column(0).into_owned();
        let alpha = if v[0] >= 0.0 { -best_norm } else { best_norm };
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for c in step..p {
                let mut col = a.view_mut((step, c), (n - step, 1));
                let dot = v.dot(&col.column(0));
                col.column_mut(0).axpy(-2.0 * dot / vnorm2, &v, 1.0);
            }
        }
        rank += 1;
    }
    let mut dependent: Vec<usize> = perm[rank..].to_vec();
    dependent.sort_unstable();
    RankReport { rank, dependent }
}

/// Solves the symmetric positive definite system `a x = b`.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solves a symmetric (possibly indefinite or singular) system by LU with a
/// fallback to a least-squares SVD solve.
pub(crate) fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(x) = a.clone().lu().solve(b) {
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let svd = a.clone().svd(true, true);
    let x = svd.solve(b, 1e-12).ok()?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_matrix() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        assert_eq!(
            pivoted_rank(&x, 1e-10),
            RankReport {
                rank: 2,
                dependent: vec![]
            }
        );
    }

    #[test]
    fn duplicate_column_is_flagged() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, -1.0, -1.0, 1.0, 5.0, 5.0]);
        let r = pivoted_rank(&x, 1e-10);
        assert_eq!(r.rank, 2);
        assert_eq!(r.dependent.len(), 1);
        assert!(r.dependent[0] == 1 || r.dependent[0] == 2);
    }

    #[test]
    fn more_columns_than_rows() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let r = pivoted_rank(&x, 1e-10);
        assert_eq!(r.rank, 2);
        assert_eq!(r.dependent.len(), 1);
    }

    #[test]
    fn spd_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = solve_spd(a.clone(), &b).unwrap();
        assert!((a * x - b).norm() < 1e-12);
    }
}

//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Indices of a maximal linearly independent subset of the rows of `a`,
/// found by Gaussian elimination with partial pivoting.
pub(crate) fn independent_rows(a: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let (m, n) = a.shape();
    let mut work = a.clone();
    let mut order: Vec<usize> = (0..m).collect();
    let mut rank = 0;
    for col in 0..n {
        if rank == m {
            break;
        }
        let (piv, val) = (rank..m)
            .map(|r| (r, work[(r, col)].abs()))
            .fold((rank, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if val <= tol {
            continue;
        }
        work.swap_rows(rank, piv);
        order.swap(rank, piv);
        for r in (rank + 1)..m {
            let factor = work[(r, col)] / work[(rank, col)];
            if factor != 0.0 {
                for c in col..n {
                    let delta = factor * work[(rank, c)];
                    work[(r, c)] -= delta;
                }
            }
        }
        rank += 1;
    }
    let mut keep = order[..rank].to_vec();
    keep.sort_unstable();
    keep
}

/// Solves the square system `k · x = rhs`, `None` if `k` is singular.
pub(crate) fn solve(k: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    k.lu().solve(rhs)
}

/// As [`solve`], followed by one round of iterative refinement.
pub(crate) fn solve_refined(k: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = k.clone().lu();
    let mut x = lu.solve(rhs)?;
    let r = rhs - k * &x;
    x += lu.solve(&r)?;
    Some(x)
}

/// Singular values of a square matrix, descending.
pub(crate) fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MetaError, Result};

/// Outcome of a diagonally pivoted Cholesky factorisation `P' A P = L L'`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    /// n×rank lower-trapezoidal factor, rows in pivoted order.
    pub factor: DMatrix<f64>,
    /// `perm[j]` is the original index of pivoted row j.
    pub perm: Vec<usize>,
    pub rank: usize,
}

impl PivotedCholesky {
    /// Original column indices that were not selected as pivots.
    pub fn dependent_columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self.perm[self.rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    /// `A v` reconstructed as `P L z`, used for correlated sampling.
    pub fn apply(&self, z: &[f64]) -> DVector<f64> {
        let n = self.perm.len();
        let mut out = DVector::zeros(n);
        for row in 0..n {
            let mut acc = 0.0;
            for col in 0..self.rank.min(row + 1) {
                acc += self.factor[(row, col)] * z[col];
            }
            out[self.perm[row]] = acc;
        }
        out
    }
}

/// Pivoted Cholesky of a symmetric PSD matrix.
///
/// Pivots smaller than `tol` (absolute) end the factorisation; the remaining
/// Schur complement must then be zero within `tol`, otherwise the matrix is
/// reported as not PSD together with the offending (1-based) leading minor.
pub fn pivoted_cholesky(a: &DMatrix<f64>, tol: f64) -> Result<PivotedCholesky> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "pivoted_cholesky needs a square matrix");
    let mut work = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut factor = DMatrix::zeros(n, n);
    let mut rank = 0;

    for j in 0..n {
        // largest remaining diagonal
        let (piv, piv_val) = (j..n)
            .map(|i| (i, work[(i, i)]))
            .fold((j, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_val <= tol {
            let worst = (j..n)
                .flat_map(|r| (j..n).map(move |c| (r, c)))
                .map(|(r, c)| work[(r, c)].abs())
                .fold(0.0, f64::max);
            let min_diag = (j..n).map(|i| work[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_diag < -tol || worst > tol.max(1e-8 * scale_of(a)) {
                return Err(MetaError::NotPsd {
                    minor: j + 1,
                    pivot: min_diag.min(piv_val),
                });
            }
            break;
        }
        if piv != j {
            work.swap_rows(j, piv);
            work.swap_columns(j, piv);
            factor.swap_rows(j, piv);
            perm.swap(j, piv);
        }
        let d = work[(j, j)].sqrt();
        factor[(j, j)] = d;
        for i in (j + 1)..n {
            factor[(i, j)] = work[(i, j)] / d;
        }
        for r in (j + 1)..n {
            for c in (j + 1)..=r {
                let v = work[(r, c)] - factor[(r, j)] * factor[(c, j)];
                work[(r, c)] = v;
                work[(c, r)] = v;
            }
        }
        rank += 1;
    }

    Ok(PivotedCholesky {
        factor: factor.columns(0, rank).into_owned(),
        perm,
        rank,
    })
}

fn scale_of(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0)
}

/// Inverse of a symmetric positive definite matrix. 1×1 and 2×2 use closed
/// forms; larger matrices go through the pivoted Cholesky factor.
pub fn spd_inverse(a: &DMatrix<f64>, min_eig: f64) -> std::result::Result<DMatrix<f64>, f64> {
    match a.nrows() {
        0 => Ok(DMatrix::zeros(0, 0)),
        1 => {
            let v = a[(0, 0)];
            if v > min_eig {
                Ok(DMatrix::from_element(1, 1, 1.0 / v))
            } else {
                Err(v)
            }
        }
        2 => {
            let (p, q, r) = (a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), a[(1, 1)]);
            let tr = p + r;
            let det = p * r - q * q;
            let disc = ((p - r) * (p - r) + 4.0 * q * q).sqrt();
            let lo = 0.5 * (tr - disc);
            if lo <= min_eig || det <= 0.0 {
                return Err(lo);
            }
            Ok(DMatrix::from_row_slice(2, 2, &[r / det, -q / det, -q / det, p / det]))
        }
        _ => {
            let eig = SymmetricEigen::new(symmetrize(a));
            let lo = eig.eigenvalues.min();
            if lo <= min_eig {
                return Err(lo);
            }
            let chol = nalgebra::Cholesky::new(symmetrize(a)).ok_or(lo)?;
            Ok(symmetrize(&chol.inverse()))
        }
    }
}

/// `(A + A') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetric matrix function `V f(Λ) V'` via the eigendecomposition.
pub fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let vals = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Symmetric inverse square root with eigenvalues below `cutoff` mapped to 0.
pub fn sym_inv_sqrt_pinv(a: &DMatrix<f64>, cutoff: f64) -> DMatrix<f64> {
    sym_apply(a, |l| if l < cutoff { 0.0 } else { 1.0 / l.sqrt() })
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Upper Cholesky factor `R` with `R'R = A` for a symmetric PD block.
pub fn upper_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrize(a)).map(|c| c.l().transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pivoted_cholesky_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 3.0, 0.1, 0.4, 0.1, 2.0]);
        let f = pivoted_cholesky(&a, 1e-12).unwrap();
        assert_eq!(f.rank, 3);
        let l = &f.factor;
        let llt = l * l.transpose();
        for r in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(llt[(r, c)], a[(f.perm[r], f.perm[c])], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pivoted_cholesky_flags_rank_and_indefinite() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let f = pivoted_cholesky(&(x.transpose() * &x), 1e-10).unwrap();
        assert_eq!(f.rank, 1);
        assert_eq!(f.dependent_columns().len(), 1);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(pivoted_cholesky(&bad, 1e-10), Err(MetaError::NotPsd { minor: 2, .. })));
    }

    #[test]
    fn closed_form_inverse_matches_general() {
        let a = DMatrix::from_row_slice(2, 2, &[0.07, 0.037, 0.037, 0.08]);
        let inv = spd_inverse(&a, 1e-12).unwrap();
        let id = &a * inv;
        assert_relative_eq!(id, DMatrix::identity(2, 2), epsilon = 1e-12);
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_inverse(&sing, 1e-12).is_err());
    }

    #[test]
    fn inverse_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = sym_inv_sqrt_pinv(&a, 1e-10);
        let back = &s * &a * &s;
        assert_relative_eq!(back, DMatrix::identity(2, 2), epsilon = 1e-12);
    }
}

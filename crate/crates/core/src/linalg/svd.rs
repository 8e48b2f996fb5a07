//! One-sided (Hestenes) Jacobi SVD.
//!
//! Column pairs of a working copy are rotated until every pair is orthogonal
//! to within [`SVD_TOLERANCE`] relative to the column norms. The column norms
//! are then the singular values, the normalised columns the left singular
//! vectors, and the accumulated rotations the right singular vectors.
//! Wide inputs are handled by decomposing the transpose.

use super::Matrix;
use crate::error::{Error, Result};

/// Relative off-diagonal Gram tolerance `|<a_p, a_q>| <= tol * |a_p| |a_q|`.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 60;

// Columns whose norm falls below this fraction of the largest are treated
// as null directions and get completed to an orthonormal basis.
const NULL_RATIO: f64 = 1e-13;

/// Thin SVD: `u` is `m x p`, `s` has `p` entries, `vt` is `p x n`,
/// `p = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.vt).expect("consistent svd factors")
    }

    /// Number of singular values above `rel_tol * s_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let smax = self.s.first().copied().unwrap_or(0.0);
        if smax <= 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > rel_tol * smax).count()
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Contract(format!("svd of empty matrix {}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Contract("svd input has non-finite entries".into()));
    }
    let (u, s, v) = if m.rows() >= m.cols() {
        tall_svd(m)?
    } else {
        let (ut, s, vt) = tall_svd(&m.transpose())?;
        (vt, s, ut)
    };
    let mut u = u;
    let mut v = v;
    // Sign convention: largest-magnitude entry of every u column is positive.
    for c in 0..u.cols() {
        let mut best = 0usize;
        for r in 1..u.rows() {
            if u[(r, c)].abs() > u[(best, c)].abs() {
                best = r;
            }
        }
        if u[(best, c)] < 0.0 {
            for r in 0..u.rows() {
                u[(r, c)] = -u[(r, c)];
            }
            for r in 0..v.rows() {
                v[(r, c)] = -v[(r, c)];
            }
        }
    }
    Ok(SvdResult {
        u,
        s,
        vt: v.transpose(),
    })
}

/// Returns `(u: m x n, s, v: n x n)` for `m >= n`, sorted by descending `s`.
fn tall_svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || gamma.abs() <= SVD_TOLERANCE * scale {
                    continue;
                }
                residual = residual.max(gamma.abs() / scale);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "jacobi svd did not converge in {SVD_MAX_SWEEPS} sweeps; off-diagonal residual {residual:e}"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps tied singular values in original column order.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let smax = norms[order[0]];
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        if norms[j] > 0.0 && norms[j] > NULL_RATIO * smax {
            u_cols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            null_slots.push(slot);
        }
    }
    complete_basis(&mut u_cols, &null_slots, m);

    let u = Matrix::from_fn(m, n, |r, c| u_cols[c][r]);
    let v = Matrix::from_fn(n, n, |r, c| vcols[order[c]][r]);
    Ok((u, s, v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the columns listed in `slots` with unit vectors orthogonal to every
/// other column, drawing candidates from the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize], m: usize) {
    for &slot in slots {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            // Two Gram–Schmidt passes against the filled columns.
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == slot || (slots.contains(&k) && col.iter().all(|v| *v == 0.0)) {
                        continue;
                    }
                    let proj = dot(&cand, col);
                    for (x, y) in cand.iter_mut().zip(col) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("m >= 1");
        cols[slot] = cand.into_iter().map(|x| x / norm).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul_tn, Rng};

    fn orthonormality_error(u: &Matrix) -> f64 {
        let g = matmul_tn(u, u).unwrap();
        g.max_abs_diff(&Matrix::identity(u.cols())).unwrap()
    }

    #[test]
    fn diagonal_input() {
        let r = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 1.0]);
        assert_eq!(r.u, Matrix::identity(2));
    }

    #[test]
    fn diagonal_with_swapped_order_is_sorted() {
        let r = svd(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 1.0]);
        assert!(r.reconstruct().max_abs_diff(&Matrix::diag(&[1.0, 3.0])).unwrap() < 1e-15);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum_and_orthonormal_u() {
        for (m, n) in [(4, 3), (3, 5), (1, 1)] {
            let r = svd(&Matrix::zeros(m, n)).unwrap();
            assert!(r.s.iter().all(|s| *s == 0.0));
            assert!(orthonormality_error(&r.u) < 1e-12);
            assert_eq!(r.numerical_rank(1e-12), 0);
        }
    }

    #[test]
    fn rank_deficient_input_completes_u() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        let r = svd(&a).unwrap();
        assert_eq!(r.numerical_rank(1e-10), 1);
        assert!(orthonormality_error(&r.u) < 1e-10);
        assert!(r.reconstruct().max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn wide_and_tall_inputs_reconstruct() {
        let mut rng = Rng::new(8);
        for (m, n) in [(8, 5), (5, 8), (1, 6), (6, 1)] {
            let a = rng.gaussian_matrix(m, n, 1.0);
            let r = svd(&a).unwrap();
            assert_eq!(r.u.shape(), crate::error::Shape(m, m.min(n)));
            assert_eq!(r.vt.shape(), crate::error::Shape(m.min(n), n));
            assert!(r.reconstruct().max_abs_diff(&a).unwrap() <= 1e-8 * a.max_abs().max(1.0));
            assert!(orthonormality_error(&r.u) <= 1e-8);
            assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let a = Rng::new(21).gaussian_matrix(6, 4, 1.0);
        let r = svd(&a).unwrap();
        for c in 0..r.u.cols() {
            let col = r.u.column(c);
            let big = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(svd(&Matrix::zeros(0, 3)).is_err());
        let mut a = Matrix::zeros(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(svd(&a).is_err());
    }
}

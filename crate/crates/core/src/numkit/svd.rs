//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Jacobi is slower than Golub–Kahan for large inputs but reaches relative
//! accuracy close to machine precision, which SVCCA needs when it truncates
//! on cumulative spectral mass.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// `m = u · diag(s) · vᵀ` with `k = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct Svd {
    /// rows × k, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// cols × k, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        let k = self.s.len();
        for r in 0..us.rows() {
            let row = us.row_mut(r);
            for j in 0..k {
                row[j] *= self.s[j];
            }
        }
        us.matmul_t(&self.v).expect("svd factors are conformable")
    }
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if rows >= cols {
        // Columns of m are the rows of mᵀ, which keeps rotations contiguous.
        let (u, s, v) = jacobi_tall(m.transpose(), rows, cols)?;
        Ok(Svd { u, s, v })
    } else {
        let (u, s, v) = jacobi_tall(m.clone(), cols, rows)?;
        Ok(Svd { u: v, s, v: u })
    }
}

/// `cols_major` holds the `n` columns (each of length `len`) of a tall
/// matrix as rows. Returns (U: len×n, s, V: n×n).
fn jacobi_tall(mut cols_major: Matrix, len: usize, n: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let mut vt = Matrix::identity(n);
    let tol = 1e-15;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let a = cols_major.row(p);
                    let b = cols_major.row(q);
                    (dot(a, a), dot(b, b), dot(a, b))
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols_major, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Decomposition { rows: len, cols: n });
    }

    let norms: Vec<f64> = cols_major.row_iter().map(|r| dot(r, r).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let zero_cut = scale * f64::EPSILON * len.max(n) as f64;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > zero_cut {
            u_cols.push(cols_major.row(j).iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            u_cols.push(orthonormal_completion(&u_cols, len));
            s.push(0.0);
        }
        for r in 0..n {
            v.set(r, k, vt.get(j, r));
        }
    }
    let mut u = Matrix::zeros(len, n);
    for (k, col) in u_cols.iter().enumerate() {
        for r in 0..len {
            u.set(r, k, col[r]);
        }
    }
    Ok((u, s, v))
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let a = &mut head[p * cols..(p + 1) * cols];
    let b = &mut tail[..cols];
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// A unit vector orthogonal to every vector in `basis`.
fn orthonormal_completion(basis: &[Vec<f64>], len: usize) -> Vec<f64> {
    for e in 0..len {
        let mut cand = vec![0.0; len];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                cand.iter_mut().zip(b).for_each(|(c, bi)| *c -= proj * bi);
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 1e-8 {
            cand.iter_mut().for_each(|c| *c /= norm);
            return cand;
        }
    }
    vec![0.0; len]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::derive_stream;

    fn random(rows: usize, cols: usize, label: &str) -> Matrix {
        let mut st = derive_stream(11, label);
        let data = (0..rows * cols).map(|_| st.normal()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
    }

    fn check(m: &Matrix) {
        let d = svd(m).unwrap();
        let rel = d.reconstruct().sub(m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(rel < 1e-10, "relative reconstruction error {rel}");
        assert!(orthonormality_error(&d.u) < 1e-8);
        assert!(orthonormality_error(&d.v) < 1e-8);
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let d = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_is_sorted_diagonal() {
        let d = svd(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn random_reconstructions() {
        check(&random(8, 5, "a"));
        check(&random(5, 8, "b"));
        check(&random(40, 40, "c"));
        check(&random(3, 60, "d"));
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        let a = random(6, 2, "e");
        let b = random(2, 6, "f");
        let m = a.matmul(&b).unwrap();
        let d = svd(&m).unwrap();
        assert!(d.s[2..].iter().all(|&x| x < 1e-12));
        assert!(orthonormality_error(&d.u) < 1e-8);
        check(&m);
    }

    #[test]
    fn zero_matrix() {
        let d = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&d.u) < 1e-12);
    }

    #[test]
    fn large_reconstruction() {
        check(&random(512, 512, "big"));
    }
}

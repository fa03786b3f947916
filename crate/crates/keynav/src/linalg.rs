//! Small dense linear-algebra routines: symmetric solves and eigendecomposition.
//!
//! Everything here works on row-major `Vec<f64>` buffers. The sizes involved
//! (normal matrices of the query dimension, covariance of a plotted subset)
//! are small enough that straightforward O(n^3) algorithms are the right tool.

use crate::error::{Error, Result};

/// Relative pivot threshold for declaring a normal matrix rank-deficient.
///
/// The normal matrix carries squared singular values, so a singular value
/// below 1e-10 of the largest shows up as a pivot below ~1e-20 of the
/// largest diagonal entry.
const RANK_TOL: f64 = 1e-20;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve the symmetric positive-definite system `a x = b` in place via
/// Cholesky factorization. `a` is n x n row-major and is destroyed.
///
/// Fails with [`Error::RankDeficient`] when a pivot collapses relative to
/// the largest diagonal entry, which is how a rank-deficient least-squares
/// design surfaces after forming normal equations.
pub fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);

    let max_diag = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    // In-place lower Cholesky.
    for j in 0..n {
        for k in 0..j {
            let ljk = a[j * n + k];
            for i in j..n {
                a[i * n + j] -= a[i * n + k] * ljk;
            }
        }
        let pivot = a[j * n + j];
        if !pivot.is_finite() || pivot <= RANK_TOL * max_diag {
            return Err(Error::RankDeficient);
        }
        let inv = 1.0 / pivot.sqrt();
        for i in j..n {
            a[i * n + j] *= inv;
        }
    }

    // Forward substitution L y = b.
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    // Back substitution L^T x = y.
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` sorted by descending eigenvalue;
/// eigenvector `i` is the i-th row of the returned matrix. Deterministic:
/// sweep order is fixed and each eigenvector's sign is normalized so its
/// largest-magnitude entry is positive.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += m[i * n + j] * m[i * n + j];
            }
        }
        s
    };

    let scale: f64 = (0..n * n).map(|i| a[i] * a[i]).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&m) <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p * n + j];
                    let mqj = m[q * n + j];
                    m[p * n + j] = c * mpj - s * mqj;
                    m[q * n + j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigenvectors = Vec::with_capacity(n);
    for &col in &order {
        let mut vec_i: Vec<f64> = (0..n).map(|r| v[r * n + col]).collect();
        // Sign convention: largest-magnitude entry positive.
        let lead = vec_i
            .iter()
            .cloned()
            .max_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap())
            .unwrap_or(1.0);
        if lead < 0.0 {
            for x in &mut vec_i {
                *x = -*x;
            }
        }
        eigenvectors.push(vec_i);
    }
    (eigenvalues, eigenvectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        // a = [[4,2],[2,3]], b = [8, 7] -> x = [1, 5/3... ] check via residual
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        let b = vec![8.0, 7.0];
        let x = cholesky_solve(&mut a, &b, 2).unwrap();
        let orig = [4.0, 2.0, 2.0, 3.0];
        for i in 0..2 {
            let r: f64 = (0..2).map(|j| orig[i * 2 + j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let mut a = vec![1.0, 1.0, 1.0, 1.0];
        let b = vec![2.0, 2.0];
        assert!(matches!(
            cholesky_solve(&mut a, &b, 2),
            Err(Error::RankDeficient)
        ));
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // Eigenvalues of [[2,1],[1,2]] are 3 and 1.
        let a = vec![2.0, 1.0, 1.0, 2.0];
        let (vals, vecs) = symmetric_eigen(&a, 2);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // Leading eigenvector is (1,1)/sqrt(2) up to sign convention.
        let e = &vecs[0];
        assert!((e[0] - e[1]).abs() < 1e-10);
        assert!(e[0] > 0.0);
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let n = 8;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let x = next();
                a[i * n + j] = x;
                a[j * n + i] = x;
            }
        }
        let (vals, vecs) = symmetric_eigen(&a, n);
        // A v = lambda v for every pair.
        for (lambda, v) in vals.iter().zip(&vecs) {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[i * n + j] * v[j]).sum();
                assert!((av - lambda * v[i]).abs() < 1e-9, "residual too large");
            }
        }
    }
}

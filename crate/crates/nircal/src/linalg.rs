//! Small dense linear-algebra helpers.
//!
//! Everything in this crate factors matrices of at most a few hundred rows
//! (scatter-correction bases, latent-variable systems, surrogate covariance
//! matrices), so plain textbook routines are used instead of a LAPACK
//! binding.

use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Returns `None` when a non-positive pivot shows up, which callers treat as
/// "not positive definite at working precision".
pub(crate) fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub(crate) fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = x[k];
            x[i] -= l[[i, k]] * t;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub(crate) fn solve_lower_t(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = x[k];
            x[i] -= l[[k, i]] * t;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solves `A x = b` through an existing Cholesky factor `L` of `A`.
pub(crate) fn cho_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    solve_lower_t(l, &solve_lower(l, b))
}

/// Solves a general square system by Gaussian elimination with partial
/// pivoting. Returns `None` for a numerically singular matrix.
pub(crate) fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(n, b.len());
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[[row, col]].abs() > m[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if m[[pivot, col]].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap([col, k], [pivot, k]);
            }
            x.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = m[[row, col]] / m[[col, col]];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                let t = m[[col, k]];
                m[[row, k]] -= factor * t;
            }
            let t = x[col];
            x[row] -= factor * t;
        }
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = x[k];
            x[i] -= m[[i, k]] * t;
        }
        x[i] /= m[[i, i]];
        if !x[i].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// Singular values of a tall matrix via one-sided Jacobi (Hestenes)
/// orthogonalization. Working on the matrix itself rather than its Gram
/// matrix keeps small singular values accurate near machine precision,
/// which the rank checks rely on. Values are returned in ascending order.
pub(crate) fn singular_values(a: &Array2<f64>) -> Vec<f64> {
    let cols = a.ncols();
    let mut m = a.clone();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let cp = m.column(p);
                let cq = m.column(q);
                let app: f64 = cp.iter().map(|v| v * v).sum();
                let aqq: f64 = cq.iter().map(|v| v * v).sum();
                let apq: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                if apq.abs() <= 1e-16 * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m.nrows() {
                    let vip = m[[i, p]];
                    let viq = m[[i, q]];
                    m[[i, p]] = c * vip - s * viq;
                    m[[i, q]] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..cols)
        .map(|c| m.column(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sigma
}

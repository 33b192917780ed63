//! Small dense linear-algebra kernels that the rest of the crate relies on.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Thin SVD `a = u * diag(s) * vᵀ` with `s` sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

/// Thin SVD by Householder QR of the tall orientation followed by one-sided
/// (Hestenes) Jacobi on the square triangular factor.
///
/// Orthogonalizing columns directly, instead of diagonalizing a Gram matrix,
/// keeps singular values far below `sqrt(eps) * s_max` accurate.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<Svd> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::dim("empty matrix"));
    }
    let transposed = rows < cols;
    let tall = if transposed { a.transpose() } else { a.clone() };
    let qr = tall.qr();
    let q = qr.q();
    let r = qr.r();
    let (left, s, right) = jacobi_svd_square(&r)?;
    // tall = (q * left) diag(s) rightᵀ
    let ql = q * left;
    Ok(if transposed {
        Svd { u: right, s, v: ql }
    } else {
        Svd { u: ql, s, v: right }
    })
}

/// One-sided Jacobi SVD of a square matrix. Returns (U, s, W) with
/// `r = U diag(s) Wᵀ`, singular values sorted nonincreasing.
fn jacobi_svd_square(r: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let n = r.ncols();
    let mut b = r.clone();
    let mut w = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                {
                    let ci = b.column(i);
                    let cj = b.column(j);
                    for k in 0..n {
                        alpha += ci[k] * ci[k];
                        beta += cj[k] * cj[k];
                        gamma += ci[k] * cj[k];
                    }
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut b, i, j, c, s);
                rotate_columns(&mut w, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdConvergence { sweeps: MAX_SWEEPS });
    }
    let norms: Vec<f64> = (0..n).map(|j| b.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let mut u = DMatrix::zeros(n, n);
    let mut wv = DMatrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let sv = norms[src];
        s.push(sv);
        if sv > 0.0 {
            u.set_column(dst, &(b.column(src) / sv));
        }
        wv.set_column(dst, &w.column(src));
    }
    Ok((u, s, wv))
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    let rows = m.nrows();
    for k in 0..rows {
        let a = m[(k, i)];
        let b = m[(k, j)];
        m[(k, i)] = c * a - s * b;
        m[(k, j)] = s * a + c * b;
    }
}

/// Least-squares solve of `a x = b` with optional ridge term
/// `(aᵀa + ridge I) x = aᵀb`. See [`solve_normal`] for the fallback rule.
pub fn ridge_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> (DMatrix<f64>, bool) {
    solve_normal(a.transpose() * a, &(a.transpose() * b), ridge)
}

/// Solves `(g + ridge I) x = rhs` for a symmetric positive semidefinite `g`.
/// Falls back to the SVD pseudo-inverse (minimum-norm solution) when the
/// regularized matrix is numerically singular; the second return value is
/// `true` in that case.
pub fn solve_normal(mut g: DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> (DMatrix<f64>, bool) {
    let cols = g.ncols();
    for i in 0..cols {
        g[(i, i)] += ridge;
    }
    let diag_max = (0..cols).map(|i| g[(i, i)]).fold(0.0, f64::max);
    if let Some(chol) = g.clone().cholesky() {
        let pivot_min = (0..cols)
            .map(|i| chol.l_dirty()[(i, i)].powi(2))
            .fold(f64::INFINITY, f64::min);
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) && pivot_min > 1e-13 * diag_max {
            return (x, false);
        }
    }
    let svd = g.svd(true, true);
    let smax = svd.singular_values.max();
    let x = svd
        .solve(rhs, smax * 1e-13)
        .unwrap_or_else(|_| DMatrix::zeros(cols, rhs.ncols()));
    (x, true)
}

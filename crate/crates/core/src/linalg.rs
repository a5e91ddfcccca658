//! Small dense linear algebra: one-sided Jacobi SVD, cyclic Jacobi
//! eigendecomposition for symmetric matrices, and a handful of norms.
//!
//! Everything here targets desk-scale problems (a few hundred rows at most),
//! where Jacobi methods are simple and accurate to near machine precision.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
pub type Matrix = Array2<f64>;

/// Off-diagonal rotations below this relative size are treated as converged.
pub const JACOBI_TOL: f64 = 1e-12;
/// Singular values at or below `RANK_TOL * sigma_1` do not count toward rank.
pub const RANK_TOL: f64 = 1e-9;

const MAX_SWEEPS: usize = 100;

/// Thin singular value decomposition `X = U diag(sigma) V^T`.
///
/// `u` is `m x p`, `v` is `n x p` with `p = min(m, n)`, both with orthonormal
/// columns; `sigma` is non-increasing and non-negative.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub singular_values: Vec<f64>,
    pub u: Matrix,
    pub v: Matrix,
}

impl Spectrum {
    /// Numerical rank under the fixed relative cutoff [`RANK_TOL`].
    pub fn rank(&self) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .filter(|&&s| s > RANK_TOL * top)
            .count()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.singular_values.iter().sum()
    }

    /// `U diag(f(sigma)) V^T`.
    pub fn recompose_with(&self, f: impl Fn(usize, f64) -> f64) -> Matrix {
        let mut scaled = self.u.clone();
        for (j, mut col) in scaled.axis_iter_mut(Axis(1)).enumerate() {
            col *= f(j, self.singular_values[j]);
        }
        scaled.dot(&self.v.t())
    }

    pub fn recompose(&self) -> Matrix {
        self.recompose_with(|_, s| s)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(x: &Matrix) -> Result<Spectrum> {
    ensure_finite(x.view(), "svd input")?;
    let (m, n) = x.dim();
    if m < n {
        let t = svd_tall(&x.t().to_owned())?;
        return Ok(Spectrum {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        });
    }
    svd_tall(x)
}

fn svd_tall(x: &Matrix) -> Result<Spectrum> {
    let (m, n) = x.dim();
    // Work column-wise on A^T so each column of A is a contiguous row.
    let mut a = x.t().to_owned();
    let mut v = Matrix::eye(n);
    // Columns this small are zero up to rounding; rotating them never settles.
    let negligible = a.iter().map(|x| x * x).sum::<f64>() * 1e-30;

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                algorithm: "one-sided Jacobi SVD",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        converged = true;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let ai = a.row(i);
                    let aj = a.row(j);
                    (ai.dot(&ai), aj.dot(&aj), ai.dot(&aj))
                };
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut a, i, j, c, s);
                rotate_rows_t(&mut v, i, j, c, s);
            }
        }
    }

    let sigma: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| sigma[q].total_cmp(&sigma[p]));

    let top = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    let mut u = Matrix::zeros((m, n));
    let mut v_sorted = Matrix::zeros((n, n));
    let mut sorted_sigma = Vec::with_capacity(n);
    let mut filled = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        v_sorted.column_mut(dst).assign(&v.column(src));
        if s > f64::EPSILON * top.max(f64::MIN_POSITIVE) * 16.0 && s > 0.0 {
            u.column_mut(dst).assign(&(&a.row(src) / s));
            filled.push(dst);
            sorted_sigma.push(s);
        } else {
            sorted_sigma.push(0.0);
        }
    }
    complete_orthonormal(&mut u, &filled);
    Ok(Spectrum {
        singular_values: sorted_sigma,
        u,
        v: v_sorted,
    })
}

#[inline]
fn rotate_rows(a: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = a.ncols();
    for col in 0..cols {
        let ai = a[[i, col]];
        let aj = a[[j, col]];
        a[[i, col]] = c * ai - s * aj;
        a[[j, col]] = s * ai + c * aj;
    }
}

#[inline]
fn rotate_rows_t(v: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let rows = v.nrows();
    for r in 0..rows {
        let vi = v[[r, i]];
        let vj = v[[r, j]];
        v[[r, i]] = c * vi - s * vj;
        v[[r, j]] = s * vi + c * vj;
    }
}

/// Fill the columns of `u` not listed in `filled` with orthonormal vectors
/// (Gram-Schmidt against the standard basis).
fn complete_orthonormal(u: &mut Matrix, filled: &[usize]) {
    let (m, p) = u.dim();
    let mut basis: Vec<Array1<f64>> = filled.iter().map(|&c| u.column(c).to_owned()).collect();
    let mut candidate = 0;
    for col in 0..p {
        if filled.contains(&col) {
            continue;
        }
        while candidate < m {
            let mut e = Array1::<f64>::zeros(m);
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&e);
                    e.scaled_add(-proj, b);
                }
            }
            let norm = e.dot(&e).sqrt();
            if norm > 1e-8 {
                e /= norm;
                u.column_mut(col).assign(&e);
                basis.push(e);
                break;
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order with matching eigenvector
/// columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "symmetric eigendecomposition needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    ensure_finite(a.view(), "symmetric matrix")?;
    let mut s = a.clone();
    let mut vecs = Matrix::eye(n);
    let scale = frobenius(&s).max(f64::MIN_POSITIVE);
    let mut sweeps = 0;
    loop {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += s[[p, q]] * s[[p, q]];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                algorithm: "cyclic Jacobi eigendecomposition",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (s[[q, q]] - s[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[[k, p]];
                    let skq = s[[k, q]];
                    s[[k, p]] = c * skp - sn * skq;
                    s[[k, q]] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[[p, k]];
                    let sqk = s[[q, k]];
                    s[[p, k]] = c * spk - sn * sqk;
                    s[[q, k]] = sn * spk + c * sqk;
                }
                rotate_rows_t(&mut vecs, p, q, c, sn);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[[j, j]].total_cmp(&s[[i, i]]));
    let values = order.iter().map(|&i| s[[i, i]]).collect();
    let mut sorted = Matrix::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        sorted.column_mut(dst).assign(&vecs.column(src));
    }
    Ok((values, sorted))
}

pub fn frobenius(x: &Matrix) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn trace(x: &Matrix) -> f64 {
    x.diag().sum()
}

/// `diag(diag(x))`: zero out everything off the main diagonal.
pub fn diagonal_part(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.dim());
    for i in 0..x.nrows().min(x.ncols()) {
        out[[i, i]] = x[[i, i]];
    }
    out
}

/// `U diag(f(lambda)) U^T` for a symmetric eigendecomposition.
pub fn spectral_apply(values: &[f64], vectors: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.axis_iter_mut(Axis(1)).enumerate() {
        col *= f(values[j]);
    }
    scaled.dot(&vectors.t())
}

pub(crate) fn ensure_finite(x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} has non-finite entries")))
    }
}

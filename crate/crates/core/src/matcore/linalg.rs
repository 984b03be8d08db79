//! Small factorizations: Cholesky for damped Gram matrices, LU inversion for
//! gauge matrices, and a one-sided Jacobi SVD for spectral work.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Relative pivot threshold for the Cholesky factorization of Gram matrices.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Which Gram matrix to form from a factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// `MᵀM`, of size `cols(M)`.
    Left,
    /// `MMᵀ`, of size `rows(M)`.
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    /// Column space of a `k×r` factor, projector is `k×k`.
    ColumnSpace,
    /// Row space of an `r×d` factor, projector is `d×d`.
    RowSpace,
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with [`Error::SingularGram`] when a pivot drops to or below
/// `PIVOT_TOLERANCE * trace`.
pub fn cholesky(spd: &Matrix) -> Result<Matrix> {
    let n = spd.rows();
    if spd.cols() != n {
        return Err(Error::shape("cholesky", spd.shape(), spd.shape()));
    }
    let tol = PIVOT_TOLERANCE * spd.trace().abs();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = spd[(j, j)];
        for p in 0..j {
            diag -= l[(j, p)] * l[(j, p)];
        }
        if !(diag > tol) {
            return Err(Error::SingularGram { row: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = spd[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix through its Cholesky factor, symmetrized.
pub fn spd_inverse(spd: &Matrix) -> Result<Matrix> {
    let l = cholesky(spd)?;
    let n = l.rows();
    // Invert L by forward substitution, then inv = L⁻ᵀ L⁻¹.
    let mut linv = Matrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for p in col..i {
                v -= l[(i, p)] * linv[(p, col)];
            }
            linv[(i, col)] = v / l[(i, i)];
        }
    }
    let inv = linv.t_matmul(&linv)?;
    Ok(inv.symmetrized())
}

/// Gram matrix of `m` on the requested side.
pub fn gram(m: &Matrix, side: Side) -> Matrix {
    match side {
        Side::Left => m.t_matmul(m).expect("MᵀM always conforms"),
        Side::Right => m.matmul_t(m).expect("MMᵀ always conforms"),
    }
}

/// `(MᵀM + λI)⁻¹` for [`Side::Left`] or `(MMᵀ + λI)⁻¹` for [`Side::Right`].
pub fn damped_gram_inverse(m: &Matrix, side: Side, lambda: f64) -> Result<Matrix> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "damping must be a finite nonnegative number, got {lambda}"
        )));
    }
    let mut g = gram(m, side);
    g.add_diag(lambda);
    spd_inverse(&g)
}

/// Orthogonal projector onto the column space of a `k×r` factor or the row
/// space of an `r×d` factor. With `lambda > 0` this is the ridge-damped
/// version `B(BᵀB + λI)⁻¹Bᵀ` (resp. `Aᵀ(AAᵀ + λI)⁻¹A`).
pub fn projector(m: &Matrix, space: Space, lambda: f64) -> Result<Matrix> {
    match space {
        Space::ColumnSpace => {
            let inv = damped_gram_inverse(m, Side::Left, lambda)?;
            let mi = m.matmul_unchecked(&inv);
            Ok(mi.matmul_t(m)?.symmetrized())
        }
        Space::RowSpace => {
            let inv = damped_gram_inverse(m, Side::Right, lambda)?;
            let im = inv.matmul_unchecked(m);
            Ok(m.t_matmul(&im)?.symmetrized())
        }
    }
}

/// General inverse by LU with partial pivoting.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::shape("inverse", m.shape(), m.shape()));
    }
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap_or(col);
        let pivot = a[(pivot_row, col)];
        if pivot.abs() <= 1e-14 * scale {
            return Err(Error::SingularSystem(format!(
                "zero pivot in column {col} of a {n}x{n} matrix"
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(pivot_row, j)];
                a[(pivot_row, j)] = tmp;
                let tmp = inv[(col, j)];
                inv[(col, j)] = inv[(pivot_row, j)];
                inv[(pivot_row, j)] = tmp;
            }
        }
        for j in 0..n {
            a[(col, j)] /= pivot;
            inv[(col, j)] /= pivot;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = a[(i, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(i, j)] -= factor * a[(col, j)];
                inv[(i, j)] -= factor * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

/// Thin singular value decomposition `M = U diag(σ) Vᵀ`, σ sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD. Adequate for the few-hundred-wide
/// matrices used here; not tuned for anything larger.
pub fn jacobi_svd(m: &Matrix) -> Svd {
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose());
        return Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
    }
    let (rows, n) = m.shape();
    // Work on columns: store Mᵀ so each column is a contiguous row.
    let mut cols = m.transpose();
    let mut v = Matrix::identity(n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(cols.row(p), cols.row(p));
                let beta = dot(cols.row(q), cols.row(q));
                let gamma = dot(cols.row(p), cols.row(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| dot(cols.row(j), cols.row(j)).sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let mut u = Matrix::zeros(rows, n);
    let mut vout = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for i in 0..rows {
            u[(i, dst)] = if s > 0.0 { cols[(src, i)] / s } else { 0.0 };
        }
        for i in 0..n {
            // v is stored transposed (rows are right singular vectors).
            vout[(i, dst)] = v[(src, i)];
        }
    }
    Svd { u, sigma, v: vout }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.cols();
    for j in 0..n {
        let a = m[(p, j)];
        let b = m[(q, j)];
        m[(p, j)] = c * a - s * b;
        m[(q, j)] = s * a + c * b;
    }
}

/// Orthonormalizes the columns of `m` (modified Gram-Schmidt, two passes),
/// fixing signs so the diagonal of the implied R factor is positive.
pub fn orthonormal_columns(m: &Matrix) -> Result<Matrix> {
    let (rows, n) = m.shape();
    if n > rows {
        return Err(Error::PreconditionViolated(format!(
            "cannot orthonormalize {n} columns in dimension {rows}"
        )));
    }
    let mut q = m.transpose();
    for j in 0..n {
        for _pass in 0..2 {
            for p in 0..j {
                let proj = dot(q.row(p), q.row(j));
                for i in 0..rows {
                    let v = q[(p, i)];
                    q[(j, i)] -= proj * v;
                }
            }
        }
        let norm = dot(q.row(j), q.row(j)).sqrt();
        if norm <= 1e-12 {
            return Err(Error::SingularSystem(format!(
                "column {j} is linearly dependent"
            )));
        }
        for i in 0..rows {
            q[(j, i)] /= norm;
        }
    }
    Ok(q.transpose())
}

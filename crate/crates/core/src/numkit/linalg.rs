use super::{Matrix, Rng};
use crate::error::{Error, Result};

/// Thin Householder QR of an `m×n` matrix with `m ≥ n`.
///
/// Returns `(Q, R)` with `Q` of shape `m×n` having orthonormal columns and `R` upper
/// triangular `n×n`. Signs are fixed so that `diag(R) ≥ 0`.
pub fn householder_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Dimension(format!("thin QR needs rows ≥ cols, got {m}x{n}")));
    }
    // Columns are stored as rows so every reflection touches contiguous memory.
    let mut cols = a.transpose();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for k in 0..n {
        let mut v = cols.row(k)[k..].to_vec();
        let alpha = super::norm(&v);
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        // Reflect x onto -sign(x0)·‖x‖·e1 to avoid cancellation.
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm = super::norm(&v);
        for x in &mut v {
            *x /= vnorm;
        }
        for j in k..n {
            reflect(&mut cols.row_mut(j)[k..], &v);
        }
        reflectors.push(v);
    }

    // Accumulate Q = H_0 H_1 … H_{n-1} applied to the first n columns of I.
    let mut qt = Matrix::zeros(n, m);
    for j in 0..n {
        qt[(j, j)] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        // columns j < k are still e_j, which H_k leaves unchanged
        for j in k..n {
            reflect(&mut qt.row_mut(j)[k..], v);
        }
    }

    let mut r_sq = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r_sq[(i, j)] = cols[(j, i)];
        }
    }
    for k in 0..n {
        if r_sq[(k, k)] < 0.0 {
            for j in k..n {
                r_sq[(k, j)] = -r_sq[(k, j)];
            }
            for x in qt.row_mut(k) {
                *x = -*x;
            }
        }
    }
    let q = qt.transpose();
    Ok((q, r_sq))
}

/// `x ← (I − 2vvᵀ) x` for unit `v`.
fn reflect(x: &mut [f64], v: &[f64]) {
    let s = 2.0 * super::dot(v, x);
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi -= s * vi;
    }
}

/// A `d×k` matrix with orthonormal columns spanning a random subspace drawn from `rng`.
pub fn orthonormal_basis(d: usize, k: usize, rng: &mut Rng) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::Argument("basis needs at least one column".into()));
    }
    if d < k {
        return Err(Error::Dimension(format!(
            "cannot fit {k} orthonormal columns in dimension {d}"
        )));
    }
    let g = Matrix::from_vec(d, k, rng.gaussian_vec(d * k))?;
    let (q, r) = householder_qr(&g)?;
    // A Gaussian matrix is full rank with probability one; guard the measure-zero case anyway.
    if (0..k).any(|i| r[(i, i)] <= 1e-12) {
        return Err(Error::Degenerate("rank-deficient random draw".into()));
    }
    Ok(q)
}

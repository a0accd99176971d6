//! One-sided Jacobi SVD.
//!
//! Pairs of columns are rotated until every pair is numerically orthogonal.
//! The column norms are then the singular values, the normalized columns the
//! left singular vectors, and the accumulated rotations the right ones.
//! Output is sorted descending and sign-normalized so equal inputs always
//! produce bitwise-equal factors.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{KasaError, Result};

/// Sweep cap.
pub const MAX_SWEEPS: usize = 30;
/// Largest relative off-diagonal accepted when the sweep cap is hit.
pub const CONVERGENCE_TOL: f64 = 1e-12;

/// `m = u · diag(sigma) · vᵀ` with `u: n×p`, `v: m×p`, `p = min(n, m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `Σ_{i ∈ range} uᵢ σᵢ vᵢᵀ`. An empty range yields the zero matrix.
    pub fn partial_reconstruct(&self, range: std::ops::Range<usize>) -> Result<Matrix> {
        let (n, m) = (self.u.rows(), self.v.rows());
        if range.end > self.sigma.len() || range.start > range.end {
            return Err(KasaError::dim(
                "SvdFactors::partial_reconstruct",
                format!("range {range:?} of {} triplets", self.sigma.len()),
            ));
        }
        if range.is_empty() {
            return Matrix::zeros(n, m);
        }
        let u = self.u.columns(range.start, range.end)?;
        let v = self.v.columns(range.start, range.end)?;
        u.scale_columns(&self.sigma[range])?.matmul_t(&v)
    }

    pub fn reconstruct(&self) -> Result<Matrix> {
        self.partial_reconstruct(0..self.sigma.len())
    }
}

/// Threshold below which a column pair counts as orthogonal: `sqrt(len)·ε`.
fn rotation_tol(len: usize) -> f64 {
    (len as f64).sqrt() * f64::EPSILON
}

pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    let transposed = rows < cols;
    let work = if transposed { m.transpose() } else { m.clone() };
    let (len, p) = work.shape();

    // Column-major working copy so each column is contiguous.
    let mut a = work.transpose().into_vec();
    let mut v = vec![0.0; p * p];
    for i in 0..p {
        v[i * p + i] = 1.0;
    }

    let tol = rotation_tol(len);
    let mut converged = false;
    let mut last_off = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        last_off = 0.0;
        for i in 0..p {
            for j in i + 1..p {
                let (ci, cj) = column_pair(&mut a, len, i, j);
                let alpha = dot(ci, ci);
                let beta = dot(cj, cj);
                let gamma = dot(ci, cj);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                last_off = last_off.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ci, cj, c, s);
                let (vi, vj) = column_pair(&mut v, p, i, j);
                rotate(vi, vj, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged && last_off > CONVERGENCE_TOL {
        return Err(KasaError::SvdNoConvergence {
            rows,
            cols,
            sweeps: MAX_SWEEPS,
        });
    }

    let mut sigma: Vec<f64> = (0..p).map(|i| dot(&a[i * len..(i + 1) * len], &a[i * len..(i + 1) * len]).sqrt()).collect();
    let mut zero_cols = Vec::new();
    for i in 0..p {
        let col = &mut a[i * len..(i + 1) * len];
        if sigma[i] <= f64::MIN_POSITIVE {
            sigma[i] = 0.0;
            col.iter_mut().for_each(|x| *x = 0.0);
            zero_cols.push(i);
        } else {
            let inv = 1.0 / sigma[i];
            col.iter_mut().for_each(|x| *x *= inv);
        }
    }
    complete_basis(&mut a, len, p, &zero_cols);

    // Stable sort keeps the original column order among ties.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).expect("finite singular values"));

    let mut left: Vec<Vec<f64>> = order.iter().map(|&i| a[i * len..(i + 1) * len].to_vec()).collect();
    let mut right: Vec<Vec<f64>> = order.iter().map(|&i| v[i * p..(i + 1) * p].to_vec()).collect();
    let sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();

    if transposed {
        std::mem::swap(&mut left, &mut right);
    }
    for (ucol, vcol) in left.iter_mut().zip(right.iter_mut()) {
        if needs_flip(ucol) {
            ucol.iter_mut().for_each(|x| *x = -*x);
            vcol.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdFactors {
        u: Matrix::from_columns(&left)?,
        sigma,
        v: Matrix::from_columns(&right)?,
    })
}

/// True when the first entry of largest magnitude is negative.
fn needs_flip(col: &[f64]) -> bool {
    let mut best = 0.0f64;
    let mut sign_negative = false;
    for &x in col {
        if x.abs() > best {
            best = x.abs();
            sign_negative = x < 0.0;
        }
    }
    sign_negative
}

fn column_pair(buf: &mut [f64], len: usize, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (head, tail) = buf.split_at_mut(j * len);
    (&mut head[i * len..(i + 1) * len], &mut tail[..len])
}

fn rotate(ci: &mut [f64], cj: &mut [f64], c: f64, s: f64) {
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills zero columns with unit vectors orthogonal to every other column,
/// drawn deterministically from the standard basis.
fn complete_basis(a: &mut [f64], len: usize, p: usize, zero_cols: &[usize]) {
    let mut filled: Vec<bool> = (0..p).map(|i| !zero_cols.contains(&i)).collect();
    let mut candidate = 0;
    for &z in zero_cols {
        while candidate < len {
            let mut w = vec![0.0; len];
            w[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for k in (0..p).filter(|&k| filled[k]) {
                    let col = &a[k * len..(k + 1) * len];
                    let proj = dot(col, &w);
                    w.iter_mut().zip(col).for_each(|(x, c)| *x -= proj * c);
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm > 0.5 {
                a[z * len..(z + 1) * len]
                    .iter_mut()
                    .zip(&w)
                    .for_each(|(x, y)| *x = y / norm);
                filled[z] = true;
                break;
            }
        }
    }
}

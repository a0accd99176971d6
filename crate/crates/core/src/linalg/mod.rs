//! Dense real matrices, a deterministic SVD and their file formats.

pub mod dd;
pub mod io;
mod matrix;
mod svd;

pub use matrix::Matrix;
pub use svd::{svd, SvdFactors, CONVERGENCE_TOL, MAX_SWEEPS};

use crate::error::{KasaError, Result};

/// Largest singular value by power iteration on `mᵀm`, starting from the
/// all-ones vector.
pub fn power_iteration_norm(m: &Matrix, steps: usize) -> f64 {
    let mut x = vec![1.0 / (m.cols() as f64).sqrt(); m.cols()];
    let mut estimate = 0.0;
    for _ in 0..steps {
        let y = m.matvec(&x).expect("shape");
        let mut z = vec![0.0; m.cols()];
        for (i, yi) in y.iter().enumerate() {
            for (zj, mij) in z.iter_mut().zip(m.row(i)) {
                *zj += mij * yi;
            }
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm.sqrt();
        x = z.into_iter().map(|v| v / norm).collect();
    }
    estimate
}

/// Solves `a · X = b` for symmetric positive definite `a` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(KasaError::dim(
            "solve_spd",
            format!("{}x{} system with {}x{} right-hand side", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let mut l = Matrix::zeros(n, n)?;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return Err(KasaError::invalid("matrix is not positive definite"));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

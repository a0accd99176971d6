//! SVD truncation of the base matrix and the singular-value adapter on top.
//!
//! The adapted weight is `W_world + η·ΔU·diag(Δσ)·ΔVᵀ`, where `W_world`
//! keeps all but the `k` smallest singular triplets of the original matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KasaError, Result};
use crate::linalg::{svd, Matrix};

/// Standard deviation of the normal draws for `ΔV` and `Δσ`.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Frozen base matrix with its `k` minor singular directions removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedBase {
    w_world: Matrix,
    truncation_rank_k: usize,
    dropped_sigma: Vec<f64>,
    original_frobenius: f64,
}

impl TruncatedBase {
    /// Keeps the leading `min(n,m) − k` singular triplets of `w0`.
    ///
    /// `k = 0` returns `w0` itself, unchanged bit for bit.
    pub fn truncate(w0: &Matrix, k: usize) -> Result<Self> {
        let p = w0.rows().min(w0.cols());
        if k >= p {
            return Err(KasaError::invalid(format!(
                "truncation rank k={k} must be below min(n,m)={p}"
            )));
        }
        if k == 0 {
            return Ok(Self::untruncated(w0.clone()));
        }
        let f = svd(w0)?;
        let keep = p - k;
        Ok(Self {
            w_world: f.partial_reconstruct(0..keep)?,
            truncation_rank_k: k,
            dropped_sigma: f.sigma[keep..].to_vec(),
            original_frobenius: w0.frobenius_norm(),
        })
    }

    pub fn untruncated(w0: Matrix) -> Self {
        let original_frobenius = w0.frobenius_norm();
        Self {
            w_world: w0,
            truncation_rank_k: 0,
            dropped_sigma: Vec::new(),
            original_frobenius,
        }
    }

    pub fn w_world(&self) -> &Matrix {
        &self.w_world
    }

    pub fn truncation_rank(&self) -> usize {
        self.truncation_rank_k
    }

    pub fn dropped_sigma(&self) -> &[f64] {
        &self.dropped_sigma
    }

    pub fn original_frobenius(&self) -> f64 {
        self.original_frobenius
    }

    /// `sqrt(Σ dropped σ²)`, the truncation error predicted by Eckart–Young.
    pub fn predicted_error(&self) -> f64 {
        self.dropped_sigma.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    pub fn out_dim(&self) -> usize {
        self.w_world.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w_world.cols()
    }

    /// Adapter ranks available after truncation.
    pub fn max_rank(&self) -> usize {
        self.w_world.rows().min(self.w_world.cols()) - self.truncation_rank_k
    }
}

/// Trainable `(ΔU, Δσ, ΔV)` with scaling `η = α / r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KasaAdapter {
    pub(crate) delta_u: Matrix,
    pub(crate) delta_sigma: Vec<f64>,
    pub(crate) delta_v: Matrix,
    alpha: f64,
}

impl KasaAdapter {
    /// `ΔU = 0`, `ΔV` and `Δσ` drawn i.i.d. from `N(0, 0.02²)`.
    pub fn init(base: &TruncatedBase, r: usize, alpha: f64, seed: u64) -> Result<Self> {
        Self::init_with_std(base, r, alpha, seed, DEFAULT_INIT_STD)
    }

    pub fn init_with_std(base: &TruncatedBase, r: usize, alpha: f64, seed: u64, std: f64) -> Result<Self> {
        if r == 0 || r > base.max_rank() {
            return Err(KasaError::invalid(format!(
                "adapter rank r={r} must lie in 1..={} (min(n,m) − k)",
                base.max_rank()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(KasaError::invalid(format!("alpha must be positive, got {alpha}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| KasaError::invalid(format!("init std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta_v = Matrix::from_fn(base.in_dim(), r, |_, _| normal.sample(&mut rng))?;
        let delta_sigma = (0..r).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            delta_u: Matrix::zeros(base.out_dim(), r)?,
            delta_sigma,
            delta_v,
            alpha,
        })
    }

    /// Assembles an adapter from explicit factors.
    pub fn from_parts(delta_u: Matrix, delta_sigma: Vec<f64>, delta_v: Matrix, alpha: f64) -> Result<Self> {
        let r = delta_sigma.len();
        if r == 0 || delta_u.cols() != r || delta_v.cols() != r {
            return Err(KasaError::dim(
                "KasaAdapter::from_parts",
                format!(
                    "ΔU {}x{}, Δσ len {r}, ΔV {}x{}",
                    delta_u.rows(),
                    delta_u.cols(),
                    delta_v.rows(),
                    delta_v.cols()
                ),
            ));
        }
        if delta_sigma.iter().any(|s| !s.is_finite()) {
            return Err(KasaError::NonFinite("KasaAdapter::from_parts"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(KasaError::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            delta_u,
            delta_sigma,
            delta_v,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.delta_sigma.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn delta_u(&self) -> &Matrix {
        &self.delta_u
    }

    pub fn delta_sigma(&self) -> &[f64] {
        &self.delta_sigma
    }

    pub fn delta_v(&self) -> &Matrix {
        &self.delta_v
    }

    /// `nr + r + mr`.
    pub fn parameter_count(&self) -> usize {
        let r = self.rank();
        self.delta_u.rows() * r + r + self.delta_v.rows() * r
    }

    /// `ΔU · diag(Δσ) · ΔVᵀ`, without `η`.
    pub fn raw_update(&self) -> Result<Matrix> {
        self.delta_u.scale_columns(&self.delta_sigma)?.matmul_t(&self.delta_v)
    }

    /// `η · ΔU · diag(Δσ) · ΔVᵀ`.
    pub fn delta_w(&self) -> Result<Matrix> {
        Ok(self.raw_update()?.scale(self.eta()))
    }

    pub(crate) fn check_base(&self, base: &TruncatedBase) -> Result<()> {
        if self.delta_u.rows() != base.out_dim() || self.delta_v.rows() != base.in_dim() {
            return Err(KasaError::dim(
                "KaSA adapter",
                format!(
                    "adapter {}x{} against base {}x{}",
                    self.delta_u.rows(),
                    self.delta_v.rows(),
                    base.out_dim(),
                    base.in_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Intermediate products of the adapter path, reused by the gradient code.
    pub(crate) fn forward_parts(&self, base: &TruncatedBase, x: &Matrix) -> Result<ForwardParts> {
        self.check_base(base)?;
        if x.rows() != base.in_dim() {
            return Err(KasaError::dim(
                "KaSA forward",
                format!("input has {} rows, base expects {}", x.rows(), base.in_dim()),
            ));
        }
        let projected = self.delta_v.t_matmul(x)?;
        let weighted = projected.scale_rows(&self.delta_sigma)?;
        let mut output = base.w_world().matmul(x)?;
        output.add_scaled_assign(self.eta(), &self.delta_u.matmul(&weighted)?)?;
        Ok(ForwardParts {
            projected,
            weighted,
            output,
        })
    }

    /// `W_world·x + η·ΔU·(diag(Δσ)·(ΔVᵀ·x))` for a column batch `x: m×b`.
    pub fn forward(&self, base: &TruncatedBase, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_parts(base, x)?.output)
    }

    /// `W_world + η·ΔU·diag(Δσ)·ΔVᵀ`.
    pub fn merge(&self, base: &TruncatedBase) -> Result<Matrix> {
        self.check_base(base)?;
        let mut merged = base.w_world().clone();
        merged.add_scaled_assign(self.eta(), &self.raw_update()?)?;
        Ok(merged)
    }

    /// `η · max_j |Δσ_j|`, exact when `ΔU` and `ΔV` have orthonormal columns.
    pub fn spectral_norm_of_update(&self) -> SpectralNorm {
        SpectralNorm {
            value: self.eta() * self.delta_sigma.iter().fold(0.0f64, |m, s| m.max(s.abs())),
            defect_u: self.delta_u.orthogonality_defect(),
            defect_v: self.delta_v.orthogonality_defect(),
        }
    }
}

/// Spectral norm of the update, with the orthogonality defects it relies on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub defect_u: f64,
    pub defect_v: f64,
}

impl SpectralNorm {
    /// Whether both defects are within the tolerance that makes `value` exact.
    pub fn is_reliable(&self, tol: f64) -> bool {
        self.defect_u <= tol && self.defect_v <= tol
    }
}

pub(crate) struct ForwardParts {
    /// `ΔVᵀ·x`, r×b
    pub projected: Matrix,
    /// `diag(Δσ)·ΔVᵀ·x`, r×b
    pub weighted: Matrix,
    pub output: Matrix,
}

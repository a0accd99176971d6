//! LoRA, PiSSA and MiLoRA: `frozen_base + scaling·a·b` with different inits.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::DEFAULT_INIT_STD;
use crate::error::{KasaError, Result};
use crate::linalg::{svd, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Lora,
    Pissa,
    Milora,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::Lora => "lora",
            Flavor::Pissa => "pissa",
            Flavor::Milora => "milora",
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Flavor {
    type Err = KasaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Flavor::Lora),
            "pissa" => Ok(Flavor::Pissa),
            "milora" => Ok(Flavor::Milora),
            other => Err(KasaError::invalid(format!("unknown adapter flavor '{other}'"))),
        }
    }
}

/// Low-rank adapter `frozen_base + scaling · a · b`, `a: n×r`, `b: r×m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub(crate) a: Matrix,
    pub(crate) b: Matrix,
    scaling: f64,
    flavor: Flavor,
    frozen_base: Matrix,
}

fn check_rank(w0: &Matrix, r: usize) -> Result<()> {
    let p = w0.rows().min(w0.cols());
    if r == 0 || r > p {
        return Err(KasaError::invalid(format!("adapter rank r={r} must lie in 1..={p}")));
    }
    Ok(())
}

impl LowRankAdapter {
    /// `a ~ N(0, 0.02²)`, `b = 0`, scaling `α / r`; the base stays as given.
    pub fn lora(w0: &Matrix, r: usize, alpha: f64, seed: u64) -> Result<Self> {
        Self::lora_with_std(w0, r, alpha, seed, DEFAULT_INIT_STD)
    }

    pub fn lora_with_std(w0: &Matrix, r: usize, alpha: f64, seed: u64, std: f64) -> Result<Self> {
        check_rank(w0, r)?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(KasaError::invalid(format!("alpha must be positive, got {alpha}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| KasaError::invalid(format!("init std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            a: Matrix::from_fn(w0.rows(), r, |_, _| normal.sample(&mut rng))?,
            b: Matrix::zeros(r, w0.cols())?,
            scaling: alpha / r as f64,
            flavor: Flavor::Lora,
            frozen_base: w0.clone(),
        })
    }

    /// Principal init: `a = U_r·√Σ_r`, `b = √Σ_r·V_rᵀ`, base `w0 − a·b`.
    /// The seed is accepted for a uniform interface; the init is deterministic.
    pub fn pissa(w0: &Matrix, r: usize, _seed: u64) -> Result<Self> {
        check_rank(w0, r)?;
        Self::from_spectral_slice(w0, 0..r, Flavor::Pissa)
    }

    /// Minor init: the same construction on the last `r` singular triplets.
    pub fn milora(w0: &Matrix, r: usize, _seed: u64) -> Result<Self> {
        check_rank(w0, r)?;
        let p = w0.rows().min(w0.cols());
        Self::from_spectral_slice(w0, p - r..p, Flavor::Milora)
    }

    fn from_spectral_slice(w0: &Matrix, range: std::ops::Range<usize>, flavor: Flavor) -> Result<Self> {
        let f = svd(w0)?;
        let roots: Vec<f64> = f.sigma[range.clone()].iter().map(|s| s.sqrt()).collect();
        let a = f.u.columns(range.start, range.end)?.scale_columns(&roots)?;
        let b = f.v.columns(range.start, range.end)?.scale_columns(&roots)?.transpose();
        let frozen_base = w0.sub(&a.matmul(&b)?)?;
        Ok(Self {
            a,
            b,
            scaling: 1.0,
            flavor,
            frozen_base,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix, scaling: f64, flavor: Flavor, frozen_base: Matrix) -> Result<Self> {
        if a.cols() != b.rows() || a.rows() != frozen_base.rows() || b.cols() != frozen_base.cols() {
            return Err(KasaError::dim(
                "LowRankAdapter::from_parts",
                format!(
                    "a {}x{}, b {}x{}, base {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols(),
                    frozen_base.rows(),
                    frozen_base.cols()
                ),
            ));
        }
        if !scaling.is_finite() {
            return Err(KasaError::NonFinite("LowRankAdapter::from_parts"));
        }
        Ok(Self {
            a,
            b,
            scaling,
            flavor,
            frozen_base,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn frozen_base(&self) -> &Matrix {
        &self.frozen_base
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `nr + rm`.
    pub fn parameter_count(&self) -> usize {
        let r = self.rank();
        self.a.rows() * r + r * self.b.cols()
    }

    pub fn delta_w(&self) -> Result<Matrix> {
        Ok(self.a.matmul(&self.b)?.scale(self.scaling))
    }

    pub(crate) fn forward_parts(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.rows() != self.frozen_base.cols() {
            return Err(KasaError::dim(
                "low-rank forward",
                format!("input has {} rows, base expects {}", x.rows(), self.frozen_base.cols()),
            ));
        }
        let projected = self.b.matmul(x)?;
        let mut out = self.frozen_base.matmul(x)?;
        out.add_scaled_assign(self.scaling, &self.a.matmul(&projected)?)?;
        Ok((projected, out))
    }

    /// `frozen_base·x + scaling·a·(b·x)`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_parts(x)?.1)
    }

    pub fn merge(&self) -> Result<Matrix> {
        let mut merged = self.frozen_base.clone();
        merged.add_scaled_assign(self.scaling, &self.a.matmul(&self.b)?)?;
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng)).unwrap()
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn lora_starts_neutral() {
        let w0 = gaussian(6, 5, 1);
        let l = LowRankAdapter::lora(&w0, 3, 16.0, 7).unwrap();
        assert_eq!(l.a.matmul(&l.b).unwrap().max_abs(), 0.0);
        assert_eq!(l.merge().unwrap(), w0);
        assert_eq!(l, LowRankAdapter::lora(&w0, 3, 16.0, 7).unwrap());
        assert_eq!(l.parameter_count(), 6 * 3 + 3 * 5);
    }

    #[test]
    fn lora_scaling() {
        let w0 = gaussian(10, 9, 2);
        assert_eq!(LowRankAdapter::lora(&w0, 8, 16.0, 0).unwrap().scaling(), 2.0);
        assert!(LowRankAdapter::lora(&w0, 10, 16.0, 0).is_err());
        assert!(LowRankAdapter::lora(&w0, 0, 16.0, 0).is_err());
    }

    #[test]
    fn pissa_milora_diagonal() {
        let w0 = Matrix::from_diag(&[4.0, 1.0]).unwrap();
        let p = LowRankAdapter::pissa(&w0, 1, 0).unwrap();
        assert!(rel(&p.a.matmul(&p.b).unwrap(), &Matrix::from_diag(&[4.0, 0.0]).unwrap()) < 1e-15);
        assert!(rel(p.frozen_base(), &Matrix::from_diag(&[0.0, 1.0]).unwrap()) < 1e-15);
        let m = LowRankAdapter::milora(&w0, 1, 0).unwrap();
        assert!(rel(&m.a.matmul(&m.b).unwrap(), &Matrix::from_diag(&[0.0, 1.0]).unwrap()) < 1e-15);
        assert!(rel(m.frozen_base(), &Matrix::from_diag(&[4.0, 0.0]).unwrap()) < 1e-15);
    }

    #[test]
    fn svd_inits_reconstruct_and_match_spectrum() {
        let w0 = gaussian(8, 6, 3);
        let s = svd(&w0).unwrap().sigma;
        let p = LowRankAdapter::pissa(&w0, 3, 0).unwrap();
        let m = LowRankAdapter::milora(&w0, 3, 0).unwrap();
        for ad in [&p, &m] {
            assert!(rel(&ad.merge().unwrap(), &w0) <= 1e-10);
            assert_eq!(ad.scaling(), 1.0);
        }
        let top = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        let bottom = (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]).sqrt();
        assert!((p.a.matmul(&p.b).unwrap().frobenius_norm() - top).abs() <= 1e-10 * top);
        assert!((m.a.matmul(&m.b).unwrap().frobenius_norm() - bottom).abs() <= 1e-10 * bottom);
    }

    #[test]
    fn flavor_parsing() {
        for f in [Flavor::Lora, Flavor::Pissa, Flavor::Milora] {
            assert_eq!(f.as_str().parse::<Flavor>().unwrap(), f);
        }
        assert!("dora".parse::<Flavor>().is_err());
    }
}

//! Knowledge-aware singular-value adaptation (KaSA) at desk scale.
//!
//! A frozen base matrix is truncated by SVD to drop its minor singular
//! directions, and a trainable update `η·ΔU·diag(Δσ)·ΔVᵀ` is learned on top,
//! with singular-value and orthogonality regularizers. LoRA, PiSSA and MiLoRA
//! adapters share the same training and evaluation machinery for comparisons.

pub mod adapter;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod trainer;

pub use adapter::{KasaAdapter, TruncatedBase};
pub use baselines::{Flavor, LowRankAdapter};
pub use error::{KasaError, Result};
pub use linalg::{svd, Matrix, SvdFactors};
pub use objective::{Batch, Gradients, LossBreakdown, Regularization, Targets};

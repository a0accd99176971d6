//! Uniform view over the four adapter methods for training and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{KasaAdapter, TruncatedBase};
use crate::baselines::{Flavor, LowRankAdapter};
use crate::error::{KasaError, Result};
use crate::linalg::Matrix;
use crate::objective::{self, Batch, LossBreakdown, Regularization};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kasa,
    Lora,
    Pissa,
    Milora,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Kasa, Method::Lora, Method::Pissa, Method::Milora];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Kasa => "kasa",
            Method::Lora => "lora",
            Method::Pissa => "pissa",
            Method::Milora => "milora",
        }
    }

    pub fn flavor(self) -> Option<Flavor> {
        match self {
            Method::Kasa => None,
            Method::Lora => Some(Flavor::Lora),
            Method::Pissa => Some(Flavor::Pissa),
            Method::Milora => Some(Flavor::Milora),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = KasaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kasa" => Ok(Method::Kasa),
            other => other.parse::<Flavor>().map(|f| match f {
                Flavor::Lora => Method::Lora,
                Flavor::Pissa => Method::Pissa,
                Flavor::Milora => Method::Milora,
            }),
        }
    }
}

/// Rank, scaling and init settings shared by every method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Truncation count for KaSA; baselines ignore it unless `truncate_baseline` is set.
    pub truncation_k: usize,
    pub init_std: f64,
    /// Apply the truncation to the base of a low-rank baseline as well.
    pub truncate_baseline: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            truncation_k: 8,
            init_std: crate::adapter::DEFAULT_INIT_STD,
            truncate_baseline: false,
        }
    }
}

/// A frozen base with one trainable adapter attached.
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptedModel {
    Kasa { base: TruncatedBase, adapter: KasaAdapter },
    LowRank {
        adapter: LowRankAdapter,
        /// Truncation applied to the base before the adapter was built.
        truncation_k: usize,
    },
}

/// Mutable view of one trainable tensor.
pub struct ParamGroup<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl AdaptedModel {
    pub fn build(method: Method, w0: &Matrix, spec: &AdapterSpec, seed: u64) -> Result<Self> {
        match method.flavor() {
            None => {
                let base = TruncatedBase::truncate(w0, spec.truncation_k)?;
                let adapter = KasaAdapter::init_with_std(&base, spec.rank, spec.alpha, seed, spec.init_std)?;
                Ok(AdaptedModel::Kasa { base, adapter })
            }
            Some(flavor) => {
                let truncation_k = if spec.truncate_baseline { spec.truncation_k } else { 0 };
                let truncated;
                let base = if truncation_k > 0 {
                    truncated = TruncatedBase::truncate(w0, spec.truncation_k)?;
                    truncated.w_world()
                } else {
                    w0
                };
                let adapter = match flavor {
                    Flavor::Lora => LowRankAdapter::lora_with_std(base, spec.rank, spec.alpha, seed, spec.init_std)?,
                    Flavor::Pissa => LowRankAdapter::pissa(base, spec.rank, seed)?,
                    Flavor::Milora => LowRankAdapter::milora(base, spec.rank, seed)?,
                };
                Ok(AdaptedModel::LowRank { adapter, truncation_k })
            }
        }
    }

    pub fn method(&self) -> Method {
        match self {
            AdaptedModel::Kasa { .. } => Method::Kasa,
            AdaptedModel::LowRank { adapter: l, .. } => match l.flavor() {
                Flavor::Lora => Method::Lora,
                Flavor::Pissa => Method::Pissa,
                Flavor::Milora => Method::Milora,
            },
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            AdaptedModel::Kasa { base, adapter } => adapter.forward(base, x),
            AdaptedModel::LowRank { adapter: l, .. } => l.forward(x),
        }
    }

    pub fn merged(&self) -> Result<Matrix> {
        match self {
            AdaptedModel::Kasa { base, adapter } => adapter.merge(base),
            AdaptedModel::LowRank { adapter: l, .. } => l.merge(),
        }
    }

    /// Full objective. Baselines carry no regularizers, so their `l2`/`l3` are 0.
    pub fn loss(&self, batch: &Batch, reg: &Regularization) -> Result<LossBreakdown> {
        match self {
            AdaptedModel::Kasa { base, adapter } => objective::total_loss(base, adapter, batch, reg),
            AdaptedModel::LowRank { adapter: l, .. } => Ok(task_only(objective::low_rank_loss(l, batch)?, reg)),
        }
    }

    /// Task loss only.
    pub fn task_loss(&self, batch: &Batch) -> Result<f64> {
        objective::task_loss(&self.predict(&batch.inputs)?, &batch.targets)
    }

    /// Loss and gradients, in the order of [`param_groups_mut`](Self::param_groups_mut).
    pub fn loss_and_gradients(&self, batch: &Batch, reg: &Regularization) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        match self {
            AdaptedModel::Kasa { base, adapter } => {
                let (loss, g) = objective::loss_and_gradients(base, adapter, batch, reg)?;
                Ok((loss, vec![g.d_delta_u.into_vec(), g.d_delta_sigma, g.d_delta_v.into_vec()]))
            }
            AdaptedModel::LowRank { adapter: l, .. } => {
                let (loss, g) = objective::low_rank_loss_and_gradients(l, batch)?;
                Ok((task_only(loss, reg), vec![g.d_a.into_vec(), g.d_b.into_vec()]))
            }
        }
    }

    /// Trainable tensors. `Δσ` is exempt from weight decay.
    pub fn param_groups_mut(&mut self) -> Vec<ParamGroup<'_>> {
        match self {
            AdaptedModel::Kasa { adapter, .. } => vec![
                ParamGroup {
                    name: "delta_u",
                    values: adapter.delta_u.as_mut_slice(),
                    decay: true,
                },
                ParamGroup {
                    name: "delta_sigma",
                    values: &mut adapter.delta_sigma,
                    decay: false,
                },
                ParamGroup {
                    name: "delta_v",
                    values: adapter.delta_v.as_mut_slice(),
                    decay: true,
                },
            ],
            AdaptedModel::LowRank { adapter: l, .. } => vec![
                ParamGroup {
                    name: "a",
                    values: l.a.as_mut_slice(),
                    decay: true,
                },
                ParamGroup {
                    name: "b",
                    values: l.b.as_mut_slice(),
                    decay: true,
                },
            ],
        }
    }

    /// Number of minor singular triplets removed from the frozen base.
    pub fn truncation_k(&self) -> usize {
        match self {
            AdaptedModel::Kasa { base, .. } => base.truncation_rank(),
            AdaptedModel::LowRank { truncation_k, .. } => *truncation_k,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            AdaptedModel::Kasa { adapter, .. } => adapter.parameter_count(),
            AdaptedModel::LowRank { adapter: l, .. } => l.parameter_count(),
        }
    }

    pub fn delta_sigma(&self) -> Option<&[f64]> {
        match self {
            AdaptedModel::Kasa { adapter, .. } => Some(adapter.delta_sigma()),
            AdaptedModel::LowRank { .. } => None,
        }
    }

    pub fn frozen(&self) -> &Matrix {
        match self {
            AdaptedModel::Kasa { base, .. } => base.w_world(),
            AdaptedModel::LowRank { adapter: l, .. } => l.frozen_base(),
        }
    }

    /// SHA-256 of the frozen matrix bytes, hex encoded.
    pub fn frozen_fingerprint(&self) -> String {
        fingerprint(self.frozen())
    }
}

fn task_only(l1: f64, reg: &Regularization) -> LossBreakdown {
    LossBreakdown {
        l1_task: l1,
        l2_sigma: 0.0,
        l3_orth: 0.0,
        total: l1,
        beta: reg.beta,
        gamma: reg.gamma,
    }
}

pub fn fingerprint(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

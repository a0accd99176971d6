//! Adapter checkpoints: a text header line `MAGIC n m r k alpha` followed by
//! binary matrices. KaSA stores `ΔU`, `ΔV` and `Δσ` (as an `r×1` matrix);
//! the low-rank baselines store `a` and `b`. The frozen base is not stored
//! and is rebuilt from the original matrix on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapter::{KasaAdapter, TruncatedBase};
use crate::baselines::{Flavor, LowRankAdapter};
use crate::error::{KasaError, Result};
use crate::linalg::{io, Matrix};
use crate::model::AdaptedModel;

fn magic(flavor: Option<Flavor>) -> &'static str {
    match flavor {
        None => "KASA1",
        Some(Flavor::Lora) => "LORA1",
        Some(Flavor::Pissa) => "PISA1",
        Some(Flavor::Milora) => "MILO1",
    }
}

fn flavor_of(magic: &str) -> Result<Option<Flavor>> {
    match magic {
        "KASA1" => Ok(None),
        "LORA1" => Ok(Some(Flavor::Lora)),
        "PISA1" => Ok(Some(Flavor::Pissa)),
        "MILO1" => Ok(Some(Flavor::Milora)),
        other => Err(KasaError::Format(format!("unknown checkpoint magic '{other}'"))),
    }
}

/// Trainable state of one adapter, detached from its base.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Kasa {
        truncation_k: usize,
        adapter: KasaAdapter,
    },
    LowRank {
        flavor: Flavor,
        truncation_k: usize,
        /// `scaling · r`, so LoRA stores its own α.
        alpha: f64,
        a: Matrix,
        b: Matrix,
    },
}

impl Checkpoint {
    pub fn from_model(model: &AdaptedModel) -> Self {
        match model {
            AdaptedModel::Kasa { base, adapter } => Checkpoint::Kasa {
                truncation_k: base.truncation_rank(),
                adapter: adapter.clone(),
            },
            AdaptedModel::LowRank { adapter, truncation_k } => Checkpoint::LowRank {
                flavor: adapter.flavor(),
                truncation_k: *truncation_k,
                alpha: adapter.scaling() * adapter.rank() as f64,
                a: adapter.a().clone(),
                b: adapter.b().clone(),
            },
        }
    }

    /// `(n, m, r, k, alpha)`.
    fn header(&self) -> (usize, usize, usize, usize, f64) {
        match self {
            Checkpoint::Kasa { truncation_k, adapter } => (
                adapter.delta_u().rows(),
                adapter.delta_v().rows(),
                adapter.rank(),
                *truncation_k,
                adapter.alpha(),
            ),
            Checkpoint::LowRank {
                truncation_k, alpha, a, b, ..
            } => (a.rows(), b.cols(), a.cols(), *truncation_k, *alpha),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let flavor = match self {
            Checkpoint::Kasa { .. } => None,
            Checkpoint::LowRank { flavor, .. } => Some(*flavor),
        };
        let (n, m, r, k, alpha) = self.header();
        writeln!(w, "{} {n} {m} {r} {k} {alpha:?}", magic(flavor))?;
        match self {
            Checkpoint::Kasa { adapter, .. } => {
                io::write_binary(adapter.delta_u(), &mut w)?;
                io::write_binary(adapter.delta_v(), &mut w)?;
                let sigma = Matrix::new(r, 1, adapter.delta_sigma().to_vec())?;
                io::write_binary(&sigma, &mut w)?;
            }
            Checkpoint::LowRank { a, b, .. } => {
                io::write_binary(a, &mut w)?;
                io::write_binary(b, &mut w)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let header = read_line(&mut r)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(KasaError::Format(format!("checkpoint header has {} fields, expected 6", fields.len())));
        }
        let flavor = flavor_of(fields[0])?;
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| KasaError::Format(format!("checkpoint header field '{s}': {e}")))
        };
        let (n, m, rank, truncation_k) = (int(fields[1])?, int(fields[2])?, int(fields[3])?, int(fields[4])?);
        let alpha: f64 = fields[5]
            .parse()
            .map_err(|e| KasaError::Format(format!("checkpoint alpha '{}': {e}", fields[5])))?;

        let expect = |mat: &Matrix, rows: usize, cols: usize, name: &str| {
            if mat.shape() != (rows, cols) {
                return Err(KasaError::Format(format!(
                    "checkpoint {name} is {}x{}, header implies {rows}x{cols}",
                    mat.rows(),
                    mat.cols()
                )));
            }
            Ok(())
        };

        let out = match flavor {
            None => {
                let delta_u = io::read_binary(&mut r)?;
                let delta_v = io::read_binary(&mut r)?;
                let sigma = io::read_binary(&mut r)?;
                expect(&delta_u, n, rank, "delta_u")?;
                expect(&delta_v, m, rank, "delta_v")?;
                expect(&sigma, rank, 1, "delta_sigma")?;
                Checkpoint::Kasa {
                    truncation_k,
                    adapter: KasaAdapter::from_parts(delta_u, sigma.into_vec(), delta_v, alpha)?,
                }
            }
            Some(flavor) => {
                let a = io::read_binary(&mut r)?;
                let b = io::read_binary(&mut r)?;
                expect(&a, n, rank, "a")?;
                expect(&b, rank, m, "b")?;
                Checkpoint::LowRank {
                    flavor,
                    truncation_k,
                    alpha,
                    a,
                    b,
                }
            }
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(KasaError::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Reattaches the adapter to the original, untruncated base matrix.
    /// PiSSA and MiLoRA frozen bases are rebuilt from the SVD of that matrix.
    pub fn into_model(self, w0: &Matrix) -> Result<AdaptedModel> {
        match self {
            Checkpoint::Kasa { truncation_k, adapter } => {
                let base = TruncatedBase::truncate(w0, truncation_k)?;
                adapter.check_base(&base)?;
                Ok(AdaptedModel::Kasa { base, adapter })
            }
            Checkpoint::LowRank {
                flavor,
                truncation_k,
                alpha,
                a,
                b,
            } => {
                let base = if truncation_k > 0 {
                    TruncatedBase::truncate(w0, truncation_k)?.w_world().clone()
                } else {
                    w0.clone()
                };
                let r = a.cols();
                let frozen = match flavor {
                    Flavor::Lora => base,
                    Flavor::Pissa => LowRankAdapter::pissa(&base, r, 0)?.frozen_base().clone(),
                    Flavor::Milora => LowRankAdapter::milora(&base, r, 0)?.frozen_base().clone(),
                };
                let adapter = LowRankAdapter::from_parts(a, b, alpha / r as f64, flavor, frozen)?;
                Ok(AdaptedModel::LowRank { adapter, truncation_k })
            }
        }
    }
}

fn read_line<R: Read>(r: &mut R) -> Result<String> {
    let mut bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(KasaError::Format("checkpoint header is not terminated".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        bytes.push(byte[0]);
        if bytes.len() > 256 {
            return Err(KasaError::Format("checkpoint header too long".into()));
        }
    }
    String::from_utf8(bytes).map_err(|e| KasaError::Format(format!("checkpoint header: {e}")))
}

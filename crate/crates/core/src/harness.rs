//! Teacher–student benchmark: a synthetic base matrix with planted minor
//! spectrum, a low-rank downstream task, and the comparison, sweep, ablation
//! and heatmap protocols run over seeds.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KasaError, Result};
use crate::linalg::{io::fmt_f64, solve_spd, svd, Matrix};
use crate::model::{AdaptedModel, AdapterSpec, Method};
use crate::objective::{self, Batch};
use crate::trainer::{train, Dataset, RunReport, TrainConfig};

/// Standard deviation of the observation noise added to targets.
pub const OBSERVATION_NOISE_STD: f64 = 0.01;
/// Fraction of samples in the training split.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Planted singular values must stay below the smallest signal value (1).
pub const MAX_NOISE_SCALE: f64 = 5.0;
/// Candidate values for `k` and `r` sweeps before the feasibility cut.
pub const DEFAULT_GRID: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n: usize,
    pub m: usize,
    pub planted_noise_rank: usize,
    pub task_delta_rank: usize,
    pub noise_scale: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n: 64,
            m: 48,
            planted_noise_rank: 8,
            task_delta_rank: 4,
            noise_scale: 0.5,
            samples: 1000,
            seed: 0,
        }
    }
}

/// Synthetic adaptation problem. `w0 = w_signal + w_planted`, where the
/// planted part occupies the smallest singular directions of `w0`, and
/// `w_task = w_signal + Δ` with `Δ` inside the leading signal directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub spec: TaskSpec,
    pub w0: Matrix,
    pub w_signal: Matrix,
    pub w_task: Matrix,
    pub data: Dataset,
}

fn log_spaced(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (hi.ln(), lo.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

/// `Σ_j s_j · u_j v_jᵀ` over the given columns.
fn outer_sum(u: &Matrix, v: &Matrix, cols: std::ops::Range<usize>, s: &[f64]) -> Result<Matrix> {
    if cols.is_empty() {
        return Matrix::zeros(u.rows(), v.rows());
    }
    let uu = u.columns(cols.start, cols.end)?.scale_columns(s)?;
    uu.matmul_t(&v.columns(cols.start, cols.end)?)
}

pub fn make_task(spec: &TaskSpec) -> Result<SynthTask> {
    let TaskSpec {
        n,
        m,
        planted_noise_rank: planted,
        task_delta_rank: t,
        noise_scale,
        samples,
        seed,
    } = *spec;
    if n == 0 || m == 0 {
        return Err(KasaError::invalid("task dimensions must be positive"));
    }
    let p = n.min(m);
    if planted + t >= p {
        return Err(KasaError::invalid(format!(
            "planted_noise_rank + task_delta_rank = {} must be below min(n,m) = {p}",
            planted + t
        )));
    }
    if !(0.0..MAX_NOISE_SCALE).contains(&noise_scale) {
        return Err(KasaError::invalid(format!(
            "noise_scale must lie in [0, {MAX_NOISE_SCALE}), got {noise_scale}"
        )));
    }
    let n_train = (samples as f64 * TRAIN_FRACTION).floor() as usize;
    if n_train == 0 || n_train == samples {
        return Err(KasaError::invalid(format!("{samples} samples cannot fill both splits")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = svd(&gaussian(n, m, &mut rng)?)?;
    let (u, v) = (frame.u, frame.v);
    let q = p - planted;

    let signal_sigma = log_spaced(10.0, 1.0, q);
    let planted_sigma: Vec<f64> = log_spaced(0.2, 0.05, planted).iter().map(|s| noise_scale * s).collect();
    let w_signal = outer_sum(&u, &v, 0..q, &signal_sigma)?;
    let w_planted = outer_sum(&u, &v, q..p, &planted_sigma)?;
    let w0 = w_signal.add(&w_planted)?;

    let delta = if t == 0 {
        Matrix::zeros(n, m)?
    } else {
        let span = (2 * t).min(q);
        let left = svd(&gaussian(span, t, &mut rng)?)?.u;
        let right = svd(&gaussian(span, t, &mut rng)?)?.u;
        let du = u.columns(0, span)?.matmul(&left)?;
        let dv = v.columns(0, span)?.matmul(&right)?;
        let strengths: Vec<f64> = (0..t)
            .map(|i| if t == 1 { 2.0 } else { 2.0 - i as f64 / (t - 1) as f64 })
            .collect();
        outer_sum(&du, &dv, 0..t, &strengths)?
    };
    let w_task = w_signal.add(&delta)?;

    let x = gaussian(m, samples, &mut rng)?;
    let mut y = w_task.matmul(&x)?;
    for value in y.as_mut_slice() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *value += OBSERVATION_NOISE_STD * e;
    }
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..samples).collect();
    let train = Batch::regression(x.select_columns(&train_idx)?, y.select_columns(&train_idx)?)?;
    let test = Batch::regression(x.select_columns(&test_idx)?, y.select_columns(&test_idx)?)?;

    Ok(SynthTask {
        spec: *spec,
        w0,
        w_signal,
        w_task,
        data: Dataset { train, test },
    })
}

/// A seeded base, adapter and batch for gradient checks. The adapter is away
/// from its init: `ΔU`, `ΔV` entries are `N(0, 0.5²)` and `Δσ` is `N(0, 1)`,
/// with `α = 2r`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckProblem {
    pub base: crate::adapter::TruncatedBase,
    pub adapter: crate::adapter::KasaAdapter,
    pub batch: Batch,
}

pub fn gradcheck_problem(n: usize, m: usize, r: usize, k: usize, batch: usize, seed: u64) -> Result<GradcheckProblem> {
    use crate::adapter::{KasaAdapter, TruncatedBase};
    if batch == 0 {
        return Err(KasaError::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = TruncatedBase::truncate(&gaussian(n, m, &mut rng)?, k)?;
    if r == 0 || r > base.max_rank() {
        return Err(KasaError::invalid(format!("adapter rank r={r} must lie in 1..={}", base.max_rank())));
    }
    let delta_u = gaussian(n, r, &mut rng)?.scale(0.5);
    let delta_sigma = gaussian(r, 1, &mut rng)?.into_vec();
    let delta_v = gaussian(m, r, &mut rng)?.scale(0.5);
    let adapter = KasaAdapter::from_parts(delta_u, delta_sigma, delta_v, 2.0 * r as f64)?;
    let batch = Batch::regression(gaussian(m, batch, &mut rng)?, gaussian(n, batch, &mut rng)?)?;
    Ok(GradcheckProblem { base, adapter, batch })
}

/// Unconstrained least-squares fit on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Floor {
    pub weights: Matrix,
    pub train_mse: f64,
    pub test_mse: f64,
}

/// Normal equations `W·(XXᵀ) = YXᵀ` over the full `n×m` parameter space.
pub fn least_squares_floor(task: &SynthTask) -> Result<Floor> {
    let objective::Targets::Regression(y) = &task.data.train.targets else {
        return Err(KasaError::invalid("least-squares floor needs regression targets"));
    };
    let x = &task.data.train.inputs;
    let gram = x.matmul_t(x)?;
    let rhs = x.matmul_t(y)?;
    let weights = solve_spd(&gram, &rhs)?.transpose();
    let mse = |b: &Batch| objective::task_loss(&weights.matmul(&b.inputs)?, &b.targets);
    Ok(Floor {
        train_mse: mse(&task.data.train)?,
        test_mse: mse(&task.data.test)?,
        weights,
    })
}

/// Median and interquartile range with linear interpolation between order statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(KasaError::invalid("quartiles of an empty sample"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self {
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// One experimental arm: a method with its own adapter and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
}

/// Seed-aggregated outcome of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    pub method: Method,
    pub rank: usize,
    pub truncation_k: usize,
    pub parameter_count: usize,
    pub test: Quartiles,
    pub train: Quartiles,
    pub reports: Vec<RunReport>,
}

/// Trains `variant` once with seed offset `i` applied to both init and sampling.
pub fn run_cell(task: &SynthTask, variant: &Variant, i: usize) -> Result<RunReport> {
    let seed = variant.train.seed.wrapping_add(i as u64);
    let mut model = AdaptedModel::build(variant.method, &task.w0, &variant.adapter, seed)?;
    let config = TrainConfig { seed, ..variant.train.clone() };
    train(&mut model, &task.data, &config)
}

/// Runs every `(variant, seed)` cell in parallel and aggregates by cell index.
pub fn run_variants(task: &SynthTask, variants: &[Variant], n_seeds: usize) -> Result<Vec<MethodRow>> {
    if n_seeds == 0 {
        return Err(KasaError::invalid("n_seeds must be at least 1"));
    }
    if variants.is_empty() {
        return Err(KasaError::invalid("no variants to run"));
    }
    let cells: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..n_seeds).map(move |s| (v, s)))
        .collect();
    let reports: Vec<RunReport> = cells
        .par_iter()
        .map(|&(v, s)| run_cell(task, &variants[v], s))
        .collect::<Result<_>>()?;

    variants
        .iter()
        .zip(reports.chunks(n_seeds))
        .map(|(variant, reports)| {
            let test: Vec<f64> = reports.iter().map(|r| r.test_metric).collect();
            let train: Vec<f64> = reports.iter().map(|r| r.train_metric).collect();
            let model_k = match variant.method {
                Method::Kasa => variant.adapter.truncation_k,
                _ if variant.adapter.truncate_baseline => variant.adapter.truncation_k,
                _ => 0,
            };
            Ok(MethodRow {
                label: variant.label.clone(),
                method: variant.method,
                rank: variant.adapter.rank,
                truncation_k: model_k,
                parameter_count: reports[0].parameter_count,
                test: Quartiles::of(&test)?,
                train: Quartiles::of(&train)?,
                reports: reports.to_vec(),
            })
        })
        .collect()
}

/// Same rank, task and seed stream for every method.
pub fn compare(
    task: &SynthTask,
    methods: &[Method],
    adapter: &AdapterSpec,
    config: &TrainConfig,
    n_seeds: usize,
) -> Result<Vec<MethodRow>> {
    let variants: Vec<Variant> = methods
        .iter()
        .map(|&method| Variant {
            label: method.as_str().to_string(),
            method,
            adapter: *adapter,
            train: config.clone(),
        })
        .collect();
    run_variants(task, &variants, n_seeds)
}

/// The five-step ladder from plain LoRA to the full objective.
pub fn ablation_variants(adapter: &AdapterSpec, config: &TrainConfig) -> Vec<Variant> {
    let plain = AdapterSpec {
        truncate_baseline: false,
        ..*adapter
    };
    let truncated = AdapterSpec {
        truncate_baseline: true,
        ..*adapter
    };
    let with = |beta: f64, gamma: f64| TrainConfig {
        beta,
        gamma,
        ..config.clone()
    };
    vec![
        Variant {
            label: "lora".into(),
            method: Method::Lora,
            adapter: plain,
            train: config.clone(),
        },
        Variant {
            label: "truncation+lora".into(),
            method: Method::Lora,
            adapter: truncated,
            train: config.clone(),
        },
        Variant {
            label: "truncation+sv_adaptation".into(),
            method: Method::Kasa,
            adapter: plain,
            train: with(0.0, 0.0),
        },
        Variant {
            label: "+l2".into(),
            method: Method::Kasa,
            adapter: plain,
            train: with(config.beta, 0.0),
        },
        Variant {
            label: "+l3".into(),
            method: Method::Kasa,
            adapter: plain,
            train: config.clone(),
        },
    ]
}

pub fn ablation(task: &SynthTask, adapter: &AdapterSpec, config: &TrainConfig, n_seeds: usize) -> Result<Vec<MethodRow>> {
    run_variants(task, &ablation_variants(adapter, config), n_seeds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    K,
    R,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::R => "r",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub parameter_count: usize,
    pub test: Quartiles,
    pub test_metrics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub method: Method,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn grid(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn medians(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.test.median).collect()
    }

    /// Grid value with the smallest median; the first one on ties.
    pub fn argmin(&self) -> usize {
        let mut best = &self.points[0];
        for p in &self.points[1..] {
            if p.test.median < best.test.median {
                best = p;
            }
        }
        best.value
    }
}

fn check_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(KasaError::invalid("empty sweep grid"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KasaError::invalid(format!("sweep grid {grid:?} is not strictly increasing")));
    }
    Ok(())
}

fn sweep(
    task: &SynthTask,
    axis: Axis,
    method: Method,
    grid: &[usize],
    adapter: &AdapterSpec,
    config: &TrainConfig,
    n_seeds: usize,
) -> Result<SweepResult> {
    check_grid(grid)?;
    let variants: Vec<Variant> = grid
        .iter()
        .map(|&value| {
            let mut spec = *adapter;
            match axis {
                Axis::K => spec.truncation_k = value,
                Axis::R => spec.rank = value,
            }
            Variant {
                label: format!("{}={value}", axis.as_str()),
                method,
                adapter: spec,
                train: config.clone(),
            }
        })
        .collect();
    let rows = run_variants(task, &variants, n_seeds)?;
    Ok(SweepResult {
        axis,
        method,
        points: grid
            .iter()
            .zip(rows)
            .map(|(&value, row)| SweepPoint {
                value,
                parameter_count: row.parameter_count,
                test: row.test,
                test_metrics: row.reports.iter().map(|r| r.test_metric).collect(),
            })
            .collect(),
    })
}

/// KaSA test error across truncation ranks at fixed adapter rank.
pub fn sweep_truncation(
    task: &SynthTask,
    k_grid: &[usize],
    adapter: &AdapterSpec,
    config: &TrainConfig,
    n_seeds: usize,
) -> Result<SweepResult> {
    sweep(task, Axis::K, Method::Kasa, k_grid, adapter, config, n_seeds)
}

/// Test error across adapter ranks at fixed truncation, one result per method.
pub fn sweep_rank(
    task: &SynthTask,
    methods: &[Method],
    r_grid: &[usize],
    adapter: &AdapterSpec,
    config: &TrainConfig,
    n_seeds: usize,
) -> Result<Vec<SweepResult>> {
    methods
        .iter()
        .map(|&method| sweep(task, Axis::R, method, r_grid, adapter, config, n_seeds))
        .collect()
}

/// Truncation values `k` that leave room for an adapter of rank `r`.
pub fn default_k_grid(n: usize, m: usize, r: usize) -> Vec<usize> {
    let p = n.min(m);
    DEFAULT_GRID.iter().copied().filter(|&k| k + r <= p).collect()
}

/// Adapter ranks that fit after truncating `k` directions.
pub fn default_r_grid(n: usize, m: usize, k: usize) -> Vec<usize> {
    let p = n.min(m);
    DEFAULT_GRID.iter().copied().filter(|&r| k + r <= p).collect()
}

/// `|Δσ|` per run (rows) and singular-value index (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub row_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn export_heatmap(reports: &[RunReport]) -> Result<Heatmap> {
    if reports.is_empty() {
        return Err(KasaError::invalid("heatmap needs at least one run"));
    }
    let mut row_labels = Vec::with_capacity(reports.len());
    let mut values = Vec::with_capacity(reports.len());
    for (i, report) in reports.iter().enumerate() {
        let sigma = report
            .delta_sigma
            .as_ref()
            .ok_or_else(|| KasaError::invalid(format!("run {i} ({}) has no singular-value snapshot", report.method)))?;
        if let Some(first) = values.first() {
            let first: &Vec<f64> = first;
            if first.len() != sigma.len() {
                return Err(KasaError::invalid(format!(
                    "run {i} has rank {}, earlier runs have rank {}",
                    sigma.len(),
                    first.len()
                )));
            }
        }
        row_labels.push(format!("{}_seed{}", report.method, report.seed));
        values.push(sigma.iter().map(|s| s.abs()).collect());
    }
    Ok(Heatmap { row_labels, values })
}

impl Heatmap {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "run")?;
        for j in 0..self.values[0].len() {
            write!(w, ",sv_{j}")?;
        }
        writeln!(w)?;
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            write!(w, "{label}")?;
            for v in row {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| KasaError::Format("empty heatmap file".into()))??;
        let cols = header.split(',').count() - 1;
        if cols == 0 || !header.starts_with("run,") {
            return Err(KasaError::Format(format!("bad heatmap header '{header}'")));
        }
        let mut row_labels = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or_default().to_string();
            let row = fields
                .map(|f| f.parse::<f64>().map_err(|e| KasaError::Format(format!("heatmap value '{f}': {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != cols {
                return Err(KasaError::Format(format!("heatmap row '{label}' has {} values, expected {cols}", row.len())));
            }
            row_labels.push(label);
            values.push(row);
        }
        if values.is_empty() {
            return Err(KasaError::Format("heatmap has no rows".into()));
        }
        Ok(Self { row_labels, values })
    }
}

pub const TABLE_HEADER: &str = "label,method,rank,truncation_k,parameter_count,n_seeds,median_test,q1_test,q3_test,median_train";
pub const SWEEP_HEADER: &str = "axis,value,method,parameter_count,n_seeds,median_test,q1_test,q3_test";

pub fn write_table<W: Write>(rows: &[MethodRow], mut w: W) -> Result<()> {
    writeln!(w, "{TABLE_HEADER}")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            row.label,
            row.method,
            row.rank,
            row.truncation_k,
            row.parameter_count,
            row.reports.len(),
            fmt_f64(row.test.median),
            fmt_f64(row.test.q1),
            fmt_f64(row.test.q3),
            fmt_f64(row.train.median),
        )?;
    }
    Ok(())
}

pub fn write_sweep<W: Write>(results: &[SweepResult], mut w: W) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for result in results {
        for p in &result.points {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                result.axis.as_str(),
                p.value,
                result.method,
                p.parameter_count,
                p.test_metrics.len(),
                fmt_f64(p.test.median),
                fmt_f64(p.test.q1),
                fmt_f64(p.test.q3),
            )?;
        }
    }
    Ok(())
}

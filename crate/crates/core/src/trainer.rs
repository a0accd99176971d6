//! Optimization loop: mini-batch sampling, SGD / Adam with decoupled weight
//! decay, learning-rate schedules and per-step loss traces.

use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KasaError, Result};
use crate::model::{AdaptedModel, Method, ParamGroup};
use crate::objective::{Batch, LossBreakdown, Regularization};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamDecoupledWd,
}

impl FromStr for OptimizerKind {
    type Err = KasaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam_decoupled_wd" | "adamw" => Ok(OptimizerKind::AdamDecoupledWd),
            other => Err(KasaError::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_ratio·steps`, then linear decay to zero.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub gamma: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub average_aux: bool,
    pub lr_schedule: LrSchedule,
    pub warmup_ratio: f64,
}

impl Default for TrainConfig {
    /// AdamW, lr 2e-4, β 1e-4, γ 1e-3, batch 16, no weight decay.
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            steps: 500,
            batch_size: 16,
            beta: 1e-4,
            gamma: 1e-3,
            optimizer: OptimizerKind::AdamDecoupledWd,
            weight_decay: 0.0,
            seed: 0,
            average_aux: false,
            lr_schedule: LrSchedule::Constant,
            warmup_ratio: 0.0,
        }
    }
}

impl TrainConfig {
    /// Synthetic-benchmark preset: full-batch Adam, lr 1e-2 decaying linearly
    /// to zero over 500 steps, same β, γ as the default.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 500,
            batch_size: 800,
            lr_schedule: LrSchedule::Linear,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(KasaError::invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(KasaError::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(KasaError::invalid("batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(KasaError::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(KasaError::invalid(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio)));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(KasaError::invalid("beta and gamma must be nonnegative"));
        }
        Ok(())
    }

    pub fn regularization(&self) -> Regularization {
        Regularization {
            beta: self.beta,
            gamma: self.gamma,
            average_aux: self.average_aux,
        }
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => {
                let warmup = (self.warmup_ratio * self.steps as f64).ceil() as usize;
                if step < warmup {
                    self.learning_rate * (step + 1) as f64 / warmup as f64
                } else {
                    self.learning_rate * (self.steps - step) as f64 / (self.steps - warmup) as f64
                }
            }
        }
    }
}

/// Train/test split of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
}

/// Plain gradient descent with decoupled weight decay.
pub fn step_sgd(groups: &mut [ParamGroup<'_>], grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
    for (group, grad) in groups.iter_mut().zip(grads) {
        let decay = if group.decay { lr * weight_decay } else { 0.0 };
        for (p, g) in group.values.iter_mut().zip(grad) {
            *p -= decay * *p;
            *p -= lr * g;
        }
    }
}

/// Adam moments with bias correction; decay is applied to the weights
/// directly, never through the moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(group_sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, groups: &mut [ParamGroup<'_>], grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (gi, (group, grad)) in groups.iter_mut().zip(grads).enumerate() {
            let decay = if group.decay { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for (k, (p, &g)) in group.values.iter_mut().zip(grad).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *p -= decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One trace line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

impl TraceRecord {
    fn new(step: usize, l: &LossBreakdown) -> Self {
        Self {
            step,
            l1: l.l1_task,
            l2: l.l2_sigma,
            l3: l.l3_orth,
            total: l.total,
        }
    }
}

/// Equality ignores `wall_time_secs`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub trace: Vec<TraceRecord>,
    /// Task loss on the full training split after the last step.
    pub train_metric: f64,
    /// Task loss on the test split after the last step.
    pub test_metric: f64,
    pub parameter_count: usize,
    pub delta_sigma: Option<Vec<f64>>,
    /// SHA-256 of the sample indices consumed, in order.
    pub stream_hash: String,
    /// SHA-256 of the frozen matrix.
    pub base_fingerprint: String,
    /// Excluded from serialized traces so they stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl PartialEq for RunReport {
    fn eq(&self, o: &Self) -> bool {
        self.method == o.method
            && self.seed == o.seed
            && self.trace == o.trace
            && self.train_metric.to_bits() == o.train_metric.to_bits()
            && self.test_metric.to_bits() == o.test_metric.to_bits()
            && self.parameter_count == o.parameter_count
            && self.delta_sigma == o.delta_sigma
            && self.stream_hash == o.stream_hash
            && self.base_fingerprint == o.base_fingerprint
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Summary {
    summary: SummaryBody,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryBody {
    method: Method,
    seed: u64,
    steps: usize,
    train_metric: f64,
    test_metric: f64,
    parameter_count: usize,
    delta_sigma: Option<Vec<f64>>,
    stream_hash: String,
    base_fingerprint: String,
}

impl RunReport {
    /// One JSON object per step, then a summary object.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.trace {
            writeln!(w, "{}", serde_json::to_string(rec).map_err(io_err)?)?;
        }
        let summary = Summary {
            summary: SummaryBody {
                method: self.method,
                seed: self.seed,
                steps: self.trace.len(),
                train_metric: self.train_metric,
                test_metric: self.test_metric,
                parameter_count: self.parameter_count,
                delta_sigma: self.delta_sigma.clone(),
                stream_hash: self.stream_hash.clone(),
                base_fingerprint: self.base_fingerprint.clone(),
            },
        };
        writeln!(w, "{}", serde_json::to_string(&summary).map_err(io_err)?)?;
        Ok(())
    }

    /// Parses the output of [`write_trace`](Self::write_trace). Wall time is not stored and reads as 0.
    pub fn read_trace<R: BufRead>(r: R) -> Result<Self> {
        let mut trace = Vec::new();
        let mut summary = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(KasaError::Format(format!("trace line {}: record after summary", i + 1)));
            }
            if line.starts_with("{\"summary\"") {
                let s: Summary = serde_json::from_str(&line).map_err(|e| KasaError::Format(format!("trace line {}: {e}", i + 1)))?;
                summary = Some(s.summary);
            } else {
                trace.push(
                    serde_json::from_str::<TraceRecord>(&line)
                        .map_err(|e| KasaError::Format(format!("trace line {}: {e}", i + 1)))?,
                );
            }
        }
        let s = summary.ok_or_else(|| KasaError::Format("trace has no summary record".into()))?;
        if s.steps != trace.len() {
            return Err(KasaError::Format(format!(
                "summary reports {} steps but the trace has {}",
                s.steps,
                trace.len()
            )));
        }
        Ok(RunReport {
            method: s.method,
            seed: s.seed,
            trace,
            train_metric: s.train_metric,
            test_metric: s.test_metric,
            parameter_count: s.parameter_count,
            delta_sigma: s.delta_sigma,
            stream_hash: s.stream_hash,
            base_fingerprint: s.base_fingerprint,
            wall_time_secs: 0.0,
        })
    }
}

fn io_err(e: serde_json::Error) -> KasaError {
    KasaError::Format(e.to_string())
}

/// Yields mini-batch index lists: a fresh seeded permutation per epoch,
/// consumed without replacement. A batch size covering the whole split
/// yields the split in its natural order every step.
struct Sampler {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a_5eed_da7a),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn full_batch(&self) -> bool {
        self.batch_size == self.n
    }

    fn next(&mut self) -> Vec<usize> {
        if self.full_batch() {
            return (0..self.n).collect();
        }
        if self.cursor + self.batch_size > self.n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }
}

/// Minimizes the objective over the adapter parameters only.
pub fn train(model: &mut AdaptedModel, data: &Dataset, config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(KasaError::invalid("train and test splits must be nonempty"));
    }
    let started = Instant::now();
    let reg = config.regularization();
    let base_fingerprint = model.frozen_fingerprint();

    let mut sampler = Sampler::new(data.train.len(), config.batch_size, config.seed);
    let mut stream = Sha256::new();
    let sizes: Vec<usize> = model.param_groups_mut().iter().map(|g| g.values.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let idx = sampler.next();
        for &i in &idx {
            stream.update((i as u64).to_le_bytes());
        }
        let owned;
        let batch = if sampler.full_batch() {
            &data.train
        } else {
            owned = data.train.select(&idx)?;
            &owned
        };
        let (loss, grads) = model.loss_and_gradients(batch, &reg)?;
        if !loss.is_finite() {
            return Err(KasaError::Diverged { step });
        }
        trace.push(TraceRecord::new(step, &loss));

        let lr = config.lr_at(step);
        let mut groups = model.param_groups_mut();
        match config.optimizer {
            OptimizerKind::Sgd => step_sgd(&mut groups, &grads, lr, config.weight_decay),
            OptimizerKind::AdamDecoupledWd => adam.step(&mut groups, &grads, lr, config.weight_decay),
        }
    }

    let train_metric = model.task_loss(&data.train)?;
    let test_metric = model.task_loss(&data.test)?;
    if !(train_metric.is_finite() && test_metric.is_finite()) {
        return Err(KasaError::Diverged { step: config.steps });
    }
    debug_assert_eq!(base_fingerprint, model.frozen_fingerprint());

    Ok(RunReport {
        method: model.method(),
        seed: config.seed,
        trace,
        train_metric,
        test_metric,
        parameter_count: model.parameter_count(),
        delta_sigma: model.delta_sigma().map(<[f64]>::to_vec),
        stream_hash: stream.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        base_fingerprint,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(values: &mut [f64], decay: bool) -> ParamGroup<'_> {
        ParamGroup {
            name: "p",
            values,
            decay,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let g = vec![vec![0.0, 0.0]];
        step_sgd(&mut [group(&mut p, true)], &g, 0.1, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
        let mut adam = AdamState::new(&[2]);
        adam.step(&mut [group(&mut p, true)], &g, 0.1, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_converges_geometrically_on_quadratic() {
        // f(x) = ½·c·x², lr below 2/c
        let c = 4.0;
        let lr = 0.3;
        let mut x = vec![1.0];
        let mut prev = 1.0f64;
        for _ in 0..20 {
            let g = vec![vec![c * x[0]]];
            step_sgd(&mut [group(&mut x, false)], &g, lr, 0.0);
            let ratio = x[0].abs() / prev.abs();
            assert!((ratio - (1.0f64 - lr * c).abs()).abs() < 1e-12);
            prev = x[0];
        }
    }

    #[test]
    fn adam_matches_reference_sequence() {
        // Hand-rolled bias-corrected Adam on f(x) = Σ cᵢ(xᵢ − tᵢ)², with
        // decay 0.01 on the first group only.
        let coef = [0.5, 2.0, 1.5];
        let target = [1.0, -1.0, 0.25];
        let lr = 0.05;
        let wd = 0.01;
        let mut a = vec![0.3, 0.7];
        let mut b = vec![-0.2];
        let mut adam = AdamState::new(&[2, 1]);

        let mut rx = [0.3, 0.7, -0.2];
        let (mut rm, mut rv) = ([0.0; 3], [0.0; 3]);
        for t in 1..=10 {
            let grad = |x: &[f64; 3], i: usize| 2.0 * coef[i] * (x[i] - target[i]);
            let g = [grad(&rx, 0), grad(&rx, 1), grad(&rx, 2)];
            for i in 0..3 {
                rm[i] = 0.9 * rm[i] + 0.1 * g[i];
                rv[i] = 0.999 * rv[i] + 0.001 * g[i] * g[i];
                let mh = rm[i] / (1.0 - 0.9f64.powi(t));
                let vh = rv[i] / (1.0 - 0.999f64.powi(t));
                if i < 2 {
                    rx[i] -= lr * wd * rx[i];
                }
                rx[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }

            let grads = vec![
                vec![2.0 * coef[0] * (a[0] - target[0]), 2.0 * coef[1] * (a[1] - target[1])],
                vec![2.0 * coef[2] * (b[0] - target[2])],
            ];
            adam.step(&mut [group(&mut a, true), group(&mut b, false)], &grads, lr, wd);
            for (got, want) in [a[0], a[1], b[0]].iter().zip(&rx) {
                assert!((got - want).abs() <= 1e-12, "step {t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn linear_schedule() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            steps: 10,
            lr_schedule: LrSchedule::Linear,
            warmup_ratio: 0.2,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.5);
        assert_eq!(cfg.lr_at(1), 1.0);
        assert_eq!(cfg.lr_at(2), 1.0);
        assert_eq!(cfg.lr_at(9), 1.0 / 8.0);
        let constant = TrainConfig::default();
        assert_eq!(constant.lr_at(123), 2e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn sampler_is_without_replacement_per_epoch() {
        let mut s = Sampler::new(10, 3, 4);
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(s.next());
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let full = Sampler::new(5, 64, 0).next();
        assert_eq!(full, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn trace_format_is_stable() {
        let report = RunReport {
            method: Method::Kasa,
            seed: 3,
            trace: vec![TraceRecord {
                step: 0,
                l1: 0.5,
                l2: 0.0,
                l3: 1.25,
                total: 0.75,
            }],
            train_metric: 0.25,
            test_metric: 0.5,
            parameter_count: 10,
            delta_sigma: Some(vec![0.1]),
            stream_hash: "ab".into(),
            base_fingerprint: "cd".into(),
            wall_time_secs: 1.0,
        };
        let mut out = Vec::new();
        report.write_trace(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out.clone()).unwrap(),
            "{\"step\":0,\"l1\":0.5,\"l2\":0.0,\"l3\":1.25,\"total\":0.75}\n\
             {\"summary\":{\"method\":\"kasa\",\"seed\":3,\"steps\":1,\"train_metric\":0.25,\"test_metric\":0.5,\
             \"parameter_count\":10,\"delta_sigma\":[0.1],\"stream_hash\":\"ab\",\"base_fingerprint\":\"cd\"}}\n"
        );
        let back = RunReport::read_trace(out.as_slice()).unwrap();
        assert_eq!(back, report);
        assert!(RunReport::read_trace(&out[..40]).is_err());
    }
}

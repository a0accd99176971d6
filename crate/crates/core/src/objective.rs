//! Training objective `L₁ + β·L₂ + γ·L₃`, its analytic gradients and a
//! central-difference oracle, evaluated in double-double, to check them.
//!
//! * `L₁` is the task loss of the adapted linear map: mean squared error over
//!   all output entries for regression, mean softmax cross-entropy over
//!   samples for classification.
//! * `L₂ = ‖ΔU·diag(Δσ)·ΔVᵀ‖_F²`, computed on the materialized product. It
//!   equals `ΣΔσ²` only when both factors have orthonormal columns.
//! * `L₃ = ‖ΔUᵀΔU − I‖_F² + ‖ΔVᵀΔV − I‖_F²`. The squared form is the one
//!   whose derivative is `4ΔU(ΔUᵀΔU − I)`.
//!
//! `η` scales only the forward path; the regularizers act on raw parameters.

use serde::{Deserialize, Serialize};

use crate::adapter::{KasaAdapter, TruncatedBase};
use crate::baselines::LowRankAdapter;
use crate::error::{KasaError, Result};
use crate::linalg::dd::{Dd, DdMatrix};
use crate::linalg::Matrix;

/// Step used by [`finite_difference`] when the caller has no preference.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Below this magnitude on both sides a gradient coordinate is compared absolutely.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// `n×b` regression targets.
    Regression(Matrix),
    /// One class index per column; logits are the `n` outputs.
    Classes(Vec<usize>),
}

/// Column batch: `inputs` is `m×b`, one sample per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn regression(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.cols() != targets.cols() {
            return Err(KasaError::dim(
                "Batch::regression",
                format!("{} inputs vs {} targets", inputs.cols(), targets.cols()),
            ));
        }
        Ok(Self {
            inputs,
            targets: Targets::Regression(targets),
        })
    }

    pub fn classification(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.cols() != labels.len() {
            return Err(KasaError::dim(
                "Batch::classification",
                format!("{} inputs vs {} labels", inputs.cols(), labels.len()),
            ));
        }
        Ok(Self {
            inputs,
            targets: Targets::Classes(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch of the given sample indices, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        let inputs = self.inputs.select_columns(idx)?;
        let targets = match &self.targets {
            Targets::Regression(y) => Targets::Regression(y.select_columns(idx)?),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        };
        Ok(Batch { inputs, targets })
    }
}

/// Task loss of `predictions` (`n×b`) against the batch targets.
pub fn task_loss(predictions: &Matrix, targets: &Targets) -> Result<f64> {
    Ok(task_loss_and_grad(predictions, targets, false)?.0)
}

/// Task loss and `∂L₁/∂predictions`.
pub fn task_loss_and_grad(predictions: &Matrix, targets: &Targets, want_grad: bool) -> Result<(f64, Option<Matrix>)> {
    let (n, b) = predictions.shape();
    match targets {
        Targets::Regression(y) => {
            if y.shape() != predictions.shape() {
                return Err(KasaError::dim(
                    "mse",
                    format!("predictions {n}x{b} vs targets {}x{}", y.rows(), y.cols()),
                ));
            }
            let count = (n * b) as f64;
            let residual = predictions.sub(y)?;
            let loss = residual.frobenius_norm_sq() / count;
            let grad = want_grad.then(|| residual.scale(2.0 / count));
            Ok((loss, grad))
        }
        Targets::Classes(labels) => {
            if labels.len() != b {
                return Err(KasaError::dim("cross-entropy", format!("{} labels for {b} samples", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&c| c >= n) {
                return Err(KasaError::invalid(format!("class {bad} out of range for {n} outputs")));
            }
            let mut loss = 0.0;
            let mut grad = want_grad.then(|| Matrix::zeros(n, b)).transpose()?;
            for (t, &label) in labels.iter().enumerate() {
                let logits: Vec<f64> = (0..n).map(|i| predictions[(i, t)]).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                let log_norm = max + sum_exp.ln();
                loss += log_norm - logits[label];
                if let Some(g) = grad.as_mut() {
                    for (i, z) in logits.iter().enumerate() {
                        let p = (z - log_norm).exp();
                        g[(i, t)] = (p - if i == label { 1.0 } else { 0.0 }) / b as f64;
                    }
                }
            }
            Ok((loss / b as f64, grad))
        }
    }
}

/// Regularizer weights. `average_aux` divides `β·L₂ + γ·L₃` by the number of
/// singular-value groups (one per adapter), as some reference code does.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub beta: f64,
    pub gamma: f64,
    pub average_aux: bool,
}

impl Regularization {
    pub fn new(beta: f64, gamma: f64) -> Self {
        Self {
            beta,
            gamma,
            average_aux: false,
        }
    }

    pub fn none() -> Self {
        Self::new(0.0, 0.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0 && self.beta.is_finite() && self.gamma.is_finite()) {
            return Err(KasaError::invalid(format!(
                "beta and gamma must be finite and nonnegative, got {} and {}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }

    fn aux_divisor(&self) -> f64 {
        // A single adapter carries one Δσ group.
        1.0
    }

    fn weights(&self) -> (f64, f64) {
        if self.average_aux {
            let d = self.aux_divisor();
            (self.beta / d, self.gamma / d)
        } else {
            (self.beta, self.gamma)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_task: f64,
    pub l2_sigma: f64,
    pub l3_orth: f64,
    pub total: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    fn assemble(l1: f64, l2: f64, l3: f64, reg: &Regularization) -> Self {
        let (wb, wg) = reg.weights();
        Self {
            l1_task: l1,
            l2_sigma: l2,
            l3_orth: l3,
            total: l1 + wb * l2 + wg * l3,
            beta: reg.beta,
            gamma: reg.gamma,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l1_task.is_finite() && self.l2_sigma.is_finite() && self.l3_orth.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub d_delta_u: Matrix,
    pub d_delta_sigma: Vec<f64>,
    pub d_delta_v: Matrix,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.d_delta_u.as_slice().to_vec();
        out.extend_from_slice(&self.d_delta_sigma);
        out.extend_from_slice(self.d_delta_v.as_slice());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankGradients {
    pub d_a: Matrix,
    pub d_b: Matrix,
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(KasaError::invalid("empty batch"));
    }
    Ok(())
}

pub fn loss_l1(base: &TruncatedBase, adapter: &KasaAdapter, batch: &Batch) -> Result<f64> {
    check_batch(batch)?;
    task_loss(&adapter.forward(base, &batch.inputs)?, &batch.targets)
}

pub fn loss_l2(adapter: &KasaAdapter) -> Result<f64> {
    Ok(adapter.raw_update()?.frobenius_norm_sq())
}

pub fn loss_l3(adapter: &KasaAdapter) -> f64 {
    adapter.delta_u().orthogonality_defect_sq() + adapter.delta_v().orthogonality_defect_sq()
}

pub fn total_loss(base: &TruncatedBase, adapter: &KasaAdapter, batch: &Batch, reg: &Regularization) -> Result<LossBreakdown> {
    reg.validate()?;
    let l1 = loss_l1(base, adapter, batch)?;
    Ok(LossBreakdown::assemble(l1, loss_l2(adapter)?, loss_l3(adapter), reg))
}

/// Loss and exact analytic gradient of the implemented objective.
pub fn loss_and_gradients(
    base: &TruncatedBase,
    adapter: &KasaAdapter,
    batch: &Batch,
    reg: &Regularization,
) -> Result<(LossBreakdown, Gradients)> {
    reg.validate()?;
    check_batch(batch)?;
    let eta = adapter.eta();
    let sigma = adapter.delta_sigma();
    let (du, dv) = (adapter.delta_u(), adapter.delta_v());

    // Task term through y = W·x + η·ΔU·(diag(Δσ)·(ΔVᵀ·x)).
    let parts = adapter.forward_parts(base, &batch.inputs)?;
    let (l1, g_out) = task_loss_and_grad(&parts.output, &batch.targets, true)?;
    let g_out = g_out.expect("gradient requested");
    let mut d_u = g_out.matmul_t(&parts.weighted)?.scale(eta);
    let g_weighted = du.t_matmul(&g_out)?.scale(eta);
    let mut d_sigma: Vec<f64> = (0..adapter.rank())
        .map(|j| {
            g_weighted
                .row(j)
                .iter()
                .zip(parts.projected.row(j))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let g_projected = g_weighted.scale_rows(sigma)?;
    let mut d_v = batch.inputs.matmul_t(&g_projected)?;

    let (wb, wg) = reg.weights();
    // L₂ = ‖M‖² with M = ΔU·diag(Δσ)·ΔVᵀ; ∂L₂/∂M = 2M.
    let m = adapter.raw_update()?;
    let l2 = m.frobenius_norm_sq();
    if wb != 0.0 {
        let m_v = m.matmul(dv)?;
        d_u.add_scaled_assign(2.0 * wb, &m_v.scale_columns(sigma)?)?;
        let mt_u = m.t_matmul(du)?;
        d_v.add_scaled_assign(2.0 * wb, &mt_u.scale_columns(sigma)?)?;
        for (j, ds) in d_sigma.iter_mut().enumerate() {
            let diag: f64 = (0..du.rows()).map(|i| du[(i, j)] * m_v[(i, j)]).sum();
            *ds += 2.0 * wb * diag;
        }
    }

    let l3 = loss_l3(adapter);
    if wg != 0.0 {
        d_u.add_scaled_assign(wg, &orthogonality_grad(du)?)?;
        d_v.add_scaled_assign(wg, &orthogonality_grad(dv)?)?;
    }

    Ok((
        LossBreakdown::assemble(l1, l2, l3, reg),
        Gradients {
            d_delta_u: d_u,
            d_delta_sigma: d_sigma,
            d_delta_v: d_v,
        },
    ))
}

pub fn gradients(base: &TruncatedBase, adapter: &KasaAdapter, batch: &Batch, reg: &Regularization) -> Result<Gradients> {
    Ok(loss_and_gradients(base, adapter, batch, reg)?.1)
}

/// `∂‖XᵀX − I‖_F²/∂X = 4·X·(XᵀX − I)`.
pub fn orthogonality_grad(x: &Matrix) -> Result<Matrix> {
    let mut gram = x.t_matmul(x)?;
    for i in 0..gram.rows() {
        gram[(i, i)] -= 1.0;
    }
    Ok(x.matmul(&gram)?.scale(4.0))
}

/// Central differences of [`total_loss`], one coordinate at a time.
///
/// Each loss is evaluated in double-double arithmetic and the divisor is the
/// exact distance between the two perturbed parameter values, so the only
/// error left is the `O(h²)` truncation term.
pub fn finite_difference(
    base: &TruncatedBase,
    adapter: &KasaAdapter,
    batch: &Batch,
    reg: &Regularization,
    h: f64,
) -> Result<Gradients> {
    check_step(h)?;
    reg.validate()?;
    check_batch(batch)?;
    adapter.check_base(base)?;
    let oracle = DdOracle::new(base.w_world(), batch)?;
    let (wb, wg) = reg.weights();
    let mut probe = adapter.clone();
    let mut eval = |a: &KasaAdapter| oracle.kasa_total(a, wb, wg);

    let mut d_u = adapter.delta_u().clone();
    for idx in 0..d_u.as_slice().len() {
        d_u.as_mut_slice()[idx] = central(&mut probe, &mut eval, h, |a| &mut a.delta_u.as_mut_slice()[idx]);
    }
    let mut d_sigma = vec![0.0; adapter.rank()];
    for (j, slot) in d_sigma.iter_mut().enumerate() {
        *slot = central(&mut probe, &mut eval, h, |a| &mut a.delta_sigma[j]);
    }
    let mut d_v = adapter.delta_v().clone();
    for idx in 0..d_v.as_slice().len() {
        d_v.as_mut_slice()[idx] = central(&mut probe, &mut eval, h, |a| &mut a.delta_v.as_mut_slice()[idx]);
    }
    Ok(Gradients {
        d_delta_u: d_u,
        d_delta_sigma: d_sigma,
        d_delta_v: d_v,
    })
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(KasaError::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    Ok(())
}

fn central<A>(probe: &mut A, eval: &mut impl FnMut(&A) -> Dd, h: f64, slot: impl Fn(&mut A) -> &mut f64) -> f64 {
    let original = *slot(probe);
    let (up, down) = (original + h, original - h);
    *slot(probe) = up;
    let plus = eval(probe);
    *slot(probe) = down;
    let minus = eval(probe);
    *slot(probe) = original;
    ((plus - minus) / (Dd::from(up) - Dd::from(down))).to_f64()
}

/// Loss evaluation in double-double with the frozen product `W·X` cached.
struct DdOracle<'a> {
    base_out: DdMatrix,
    inputs: &'a Matrix,
    targets: &'a Targets,
}

impl<'a> DdOracle<'a> {
    fn new(frozen: &Matrix, batch: &'a Batch) -> Result<Self> {
        if frozen.cols() != batch.inputs.rows() {
            return Err(KasaError::dim(
                "finite_difference",
                format!("input has {} rows, base expects {}", batch.inputs.rows(), frozen.cols()),
            ));
        }
        Ok(Self {
            base_out: DdMatrix::product(frozen, &batch.inputs),
            inputs: &batch.inputs,
            targets: &batch.targets,
        })
    }

    fn task(&self, update: DdMatrix, scale: f64) -> Dd {
        let mut pred = self.base_out.clone();
        let s = Dd::from(scale);
        for (p, u) in pred.data.iter_mut().zip(update.data) {
            *p += s * u;
        }
        dd_task_loss(&pred, self.targets)
    }

    fn kasa_total(&self, a: &KasaAdapter, wb: f64, wg: f64) -> Dd {
        let (du, dv, sigma) = (a.delta_u(), a.delta_v(), a.delta_sigma());
        let mut projected = DdMatrix::t_product(dv, self.inputs);
        projected.scale_rows(sigma);
        let l1 = self.task(projected.left_mul(du), a.eta());

        let mut l2 = Dd::ZERO;
        for i in 0..du.rows() {
            let scaled: Vec<Dd> = du.row(i).iter().zip(sigma).map(|(&u, &s)| Dd::prod(u, s)).collect();
            for j in 0..dv.rows() {
                let mut mij = Dd::ZERO;
                for (us, &v) in scaled.iter().zip(dv.row(j)) {
                    mij += *us * Dd::from(v);
                }
                l2 += mij.sqr();
            }
        }

        let defect = |x: &Matrix| {
            let mut gram = DdMatrix::t_product(x, x);
            for i in 0..gram.rows {
                gram.data[i * gram.cols + i] = gram.data[i * gram.cols + i] - Dd::ONE;
            }
            gram.sum_sq()
        };
        let l3 = defect(du) + defect(dv);
        l1 + Dd::from(wb) * l2 + Dd::from(wg) * l3
    }

    fn low_rank_task(&self, l: &LowRankAdapter) -> Dd {
        self.task(DdMatrix::product(l.b(), self.inputs).left_mul(l.a()), l.scaling())
    }
}

fn dd_task_loss(pred: &DdMatrix, targets: &Targets) -> Dd {
    let (n, b) = (pred.rows, pred.cols);
    match targets {
        Targets::Regression(y) => {
            let mut sum = Dd::ZERO;
            for (p, &t) in pred.data.iter().zip(y.as_slice()) {
                sum += (*p - Dd::from(t)).sqr();
            }
            sum / Dd::from((n * b) as f64)
        }
        Targets::Classes(labels) => {
            let mut sum = Dd::ZERO;
            for (t, &label) in labels.iter().enumerate() {
                let max = (0..n).map(|i| pred.at(i, t)).fold(Dd::from(f64::NEG_INFINITY), |m, z| if z.hi > m.hi { z } else { m });
                let mut sum_exp = Dd::ZERO;
                for i in 0..n {
                    sum_exp += (pred.at(i, t) - max).exp();
                }
                sum += max + sum_exp.ln() - pred.at(label, t);
            }
            sum / Dd::from(b as f64)
        }
    }
}

/// Task loss of a low-rank baseline.
pub fn low_rank_loss(adapter: &LowRankAdapter, batch: &Batch) -> Result<f64> {
    check_batch(batch)?;
    task_loss(&adapter.forward(&batch.inputs)?, &batch.targets)
}

/// Task loss and gradients for `y = F·x + s·a·(b·x)`.
pub fn low_rank_loss_and_gradients(adapter: &LowRankAdapter, batch: &Batch) -> Result<(f64, LowRankGradients)> {
    check_batch(batch)?;
    let s = adapter.scaling();
    let (projected, output) = adapter.forward_parts(&batch.inputs)?;
    let (loss, g_out) = task_loss_and_grad(&output, &batch.targets, true)?;
    let g_out = g_out.expect("gradient requested");
    let d_a = g_out.matmul_t(&projected)?.scale(s);
    let g_projected = adapter.a().t_matmul(&g_out)?.scale(s);
    let d_b = g_projected.matmul_t(&batch.inputs)?;
    Ok((loss, LowRankGradients { d_a, d_b }))
}

/// Central differences of [`low_rank_loss`], evaluated like [`finite_difference`].
pub fn low_rank_finite_difference(adapter: &LowRankAdapter, batch: &Batch, h: f64) -> Result<LowRankGradients> {
    check_step(h)?;
    check_batch(batch)?;
    let oracle = DdOracle::new(adapter.frozen_base(), batch)?;
    let mut probe = adapter.clone();
    let mut eval = |p: &LowRankAdapter| oracle.low_rank_task(p);
    let mut d_a = adapter.a().clone();
    for idx in 0..d_a.as_slice().len() {
        d_a.as_mut_slice()[idx] = central(&mut probe, &mut eval, h, |p| &mut p.a.as_mut_slice()[idx]);
    }
    let mut d_b = adapter.b().clone();
    for idx in 0..d_b.as_slice().len() {
        d_b.as_mut_slice()[idx] = central(&mut probe, &mut eval, h, |p| &mut p.b.as_mut_slice()[idx]);
    }
    Ok(LowRankGradients { d_a, d_b })
}

/// Relative error of one coordinate, falling back to absolute error when both
/// values are below [`ABSOLUTE_FLOOR`].
pub fn coordinate_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABSOLUTE_FLOOR && numeric.abs() < ABSOLUTE_FLOOR {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Summary of an analytic-versus-numeric comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_error: f64,
    /// Flat index of the worst coordinate in `[ΔU | Δσ | ΔV]` order.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error <= tol
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> Result<GradCheck> {
    if analytic.len() != numeric.len() || analytic.is_empty() {
        return Err(KasaError::dim(
            "compare_gradients",
            format!("{} analytic vs {} numeric coordinates", analytic.len(), numeric.len()),
        ));
    }
    let mut report = GradCheck {
        coordinates: analytic.len(),
        max_error: -1.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = coordinate_error(a, n);
        if e > report.max_error || e.is_nan() {
            report = GradCheck {
                max_error: if e.is_nan() { f64::INFINITY } else { e },
                worst_index: i,
                worst_analytic: a,
                worst_numeric: n,
                ..report
            };
        }
    }
    Ok(report)
}

/// Runs the analytic gradient against central differences with step `h`.
pub fn gradient_check(
    base: &TruncatedBase,
    adapter: &KasaAdapter,
    batch: &Batch,
    reg: &Regularization,
    h: f64,
) -> Result<GradCheck> {
    let analytic = gradients(base, adapter, batch, reg)?;
    let numeric = finite_difference(base, adapter, batch, reg, h)?;
    compare_gradients(&analytic.flatten(), &numeric.flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng)).unwrap()
    }

    fn orthonormal(rows: usize, cols: usize, seed: u64) -> Matrix {
        crate::linalg::svd(&gaussian(rows, cols, seed)).unwrap().u
    }

    fn setup(n: usize, m: usize, r: usize, seed: u64) -> (TruncatedBase, KasaAdapter, Batch) {
        let base = TruncatedBase::truncate(&gaussian(n, m, seed), 1).unwrap();
        let adapter = KasaAdapter::from_parts(
            gaussian(n, r, seed + 1).scale(0.5),
            gaussian(r, 1, seed + 2).into_vec(),
            gaussian(m, r, seed + 3).scale(0.5),
            2.0 * r as f64,
        )
        .unwrap();
        let batch = Batch::regression(gaussian(m, 5, seed + 4), gaussian(n, 5, seed + 5)).unwrap();
        (base, adapter, batch)
    }

    #[test]
    fn mse_zero_at_targets() {
        let p = gaussian(3, 4, 1);
        assert_eq!(task_loss(&p, &Targets::Regression(p.clone())).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let p = Matrix::zeros(5, 3).unwrap();
        let l = task_loss(&p, &Targets::Classes(vec![0, 4, 2])).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
        assert!(task_loss(&p, &Targets::Classes(vec![0, 5, 2])).is_err());
    }

    #[test]
    fn l1_matches_per_sample_loop() {
        let (base, adapter, batch) = setup(6, 5, 2, 10);
        let merged = adapter.merge(&base).unwrap();
        let Targets::Regression(y) = &batch.targets else { unreachable!() };
        let mut acc = 0.0;
        for t in 0..batch.len() {
            for i in 0..6 {
                let mut pred = 0.0;
                for k in 0..5 {
                    pred += merged[(i, k)] * batch.inputs[(k, t)];
                }
                acc += (pred - y[(i, t)]).powi(2);
            }
        }
        let expected = acc / (6 * batch.len()) as f64;
        let got = loss_l1(&base, &adapter, &batch).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);

        let labels = vec![0, 3, 5, 1, 2];
        let cb = Batch::classification(batch.inputs.clone(), labels.clone()).unwrap();
        let logits = merged.matmul(&batch.inputs).unwrap();
        let mut ce = 0.0;
        for (t, &c) in labels.iter().enumerate() {
            let z: f64 = (0..6).map(|i| logits[(i, t)].exp()).sum();
            ce += z.ln() - logits[(c, t)];
        }
        ce /= labels.len() as f64;
        assert!((loss_l1(&base, &adapter, &cb).unwrap() - ce).abs() <= 1e-12 * ce);
    }

    #[test]
    fn empty_batch_rejected() {
        let (base, adapter, batch) = setup(4, 3, 1, 1);
        let empty = Batch {
            inputs: batch.inputs.clone(),
            targets: Targets::Classes(vec![]),
        };
        assert!(Batch::classification(batch.inputs.clone(), vec![]).is_err());
        assert!(loss_l1(&base, &adapter, &empty).is_err());
    }

    #[test]
    fn l2_examples() {
        let q = orthonormal(5, 2, 3);
        let p = orthonormal(4, 2, 4);
        let a = KasaAdapter::from_parts(q.clone(), vec![0.5, -0.5], p.clone(), 2.0).unwrap();
        assert!((loss_l2(&a).unwrap() - 0.5).abs() < 1e-14);
        let z = KasaAdapter::from_parts(q, vec![0.0, 0.0], p, 2.0).unwrap();
        assert_eq!(loss_l2(&z).unwrap(), 0.0);

        let (_, a, _) = setup(6, 5, 3, 20);
        let mut dense = Matrix::zeros(6, 5).unwrap();
        for i in 0..6 {
            for k in 0..5 {
                for j in 0..3 {
                    dense[(i, k)] += a.delta_u()[(i, j)] * a.delta_sigma()[j] * a.delta_v()[(k, j)];
                }
            }
        }
        let expected = dense.frobenius_norm().powi(2);
        assert!((loss_l2(&a).unwrap() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn l3_examples() {
        let q = orthonormal(5, 2, 5);
        let p = orthonormal(4, 2, 6);
        assert!(loss_l3(&KasaAdapter::from_parts(q, vec![1.0, 2.0], p, 1.0).unwrap()) < 1e-28);
        let u = Matrix::new(3, 1, vec![2.0, 0.0, 0.0]).unwrap();
        let v = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(loss_l3(&KasaAdapter::from_parts(u, vec![1.0], v, 1.0).unwrap()), 9.0);

        let (_, a, _) = setup(5, 4, 2, 30);
        let naive = |x: &Matrix| {
            let mut acc = 0.0;
            for p in 0..x.cols() {
                for q in 0..x.cols() {
                    let mut g = 0.0;
                    for i in 0..x.rows() {
                        g += x[(i, p)] * x[(i, q)];
                    }
                    if p == q {
                        g -= 1.0;
                    }
                    acc += g * g;
                }
            }
            acc
        };
        let expected = naive(a.delta_u()) + naive(a.delta_v());
        assert!((loss_l3(&a) - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn total_combines_terms() {
        let (base, adapter, batch) = setup(6, 5, 2, 40);
        let none = total_loss(&base, &adapter, &batch, &Regularization::none()).unwrap();
        assert_eq!(none.total, none.l1_task);
        let reg = Regularization::new(1e-4, 1e-3);
        let l = total_loss(&base, &adapter, &batch, &reg).unwrap();
        let independent = loss_l1(&base, &adapter, &batch).unwrap() + 1e-4 * loss_l2(&adapter).unwrap() + 1e-3 * loss_l3(&adapter);
        assert!((l.total - independent).abs() <= 1e-12 * independent.abs());
        assert!(total_loss(&base, &adapter, &batch, &Regularization::new(-1.0, 0.0)).is_err());
    }

    #[test]
    fn fresh_init_losses_by_hand() {
        let base = TruncatedBase::truncate(&gaussian(4, 3, 50), 1).unwrap();
        let a = KasaAdapter::init(&base, 1, 2.0, 9).unwrap();
        let v = a.delta_v().column(0);
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        assert_eq!(loss_l2(&a).unwrap(), 0.0);
        // ΔU = 0 gives ‖−I₁‖² = 1; ΔV contributes (‖v‖² − 1)².
        assert!((loss_l3(&a) - (1.0 + (vnorm2 - 1.0).powi(2))).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_factors_leave_no_l3_gradient() {
        let a = KasaAdapter::from_parts(orthonormal(6, 2, 61), vec![0.3, 0.2], orthonormal(5, 2, 62), 2.0).unwrap();
        assert!(orthogonality_grad(a.delta_u()).unwrap().max_abs() < 1e-14);
        assert!(orthogonality_grad(a.delta_v()).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn sigma_gradient_of_l2_alone() {
        // With the task loss switched off, only β·L₂ remains: ∂/∂Δσ_j = 2Δσ_j.
        let base = TruncatedBase::truncate(&gaussian(6, 5, 70), 1).unwrap();
        let a = KasaAdapter::from_parts(orthonormal(6, 3, 71), vec![0.5; 3], orthonormal(5, 3, 72), 2.0).unwrap();
        let x = Matrix::zeros(5, 2).unwrap();
        let y = base.w_world().matmul(&x).unwrap();
        let batch = Batch::regression(x, y).unwrap();
        let g = gradients(&base, &a, &batch, &Regularization::new(1.0, 0.0)).unwrap();
        for d in g.d_delta_sigma {
            assert!((d - 1.0).abs() < 1e-14, "{d}");
        }
    }

    #[test]
    fn analytic_matches_finite_difference() {
        for (seed, r, beta, gamma) in [(1, 1, 0.0, 0.0), (2, 2, 1e-1, 1e-1), (3, 3, 1e-4, 1e-3)] {
            let (base, adapter, batch) = setup(7, 5, r, seed * 100);
            let reg = Regularization::new(beta, gamma);
            let check = gradient_check(&base, &adapter, &batch, &reg, DEFAULT_FD_STEP).unwrap();
            assert!(check.passes(1e-6), "{check:?}");
            let cb = Batch::classification(batch.inputs.clone(), vec![0, 6, 3, 3, 1]).unwrap();
            let check = gradient_check(&base, &adapter, &cb, &reg, DEFAULT_FD_STEP).unwrap();
            assert!(check.passes(1e-6), "{check:?}");
        }
    }

    #[test]
    fn low_rank_gradients_match_finite_difference() {
        let w0 = gaussian(6, 5, 80);
        let mut l = LowRankAdapter::lora(&w0, 2, 4.0, 1).unwrap();
        l.b = gaussian(2, 5, 81);
        let batch = Batch::regression(gaussian(5, 4, 82), gaussian(6, 4, 83)).unwrap();
        let (_, g) = low_rank_loss_and_gradients(&l, &batch).unwrap();
        let n = low_rank_finite_difference(&l, &batch, 1e-5).unwrap();
        let mut a = g.d_a.into_vec();
        a.extend(g.d_b.into_vec());
        let mut b = n.d_a.into_vec();
        b.extend(n.d_b.into_vec());
        let check = compare_gradients(&a, &b).unwrap();
        assert!(check.passes(1e-6), "{check:?}");
    }

    #[test]
    fn finite_difference_exact_on_quadratic_and_constant() {
        // With x = 0 the loss depends only on the regularizers; β·L₂ with a
        // single unit-norm pair is quadratic in Δσ.
        let base = TruncatedBase::untruncated(gaussian(3, 2, 90));
        let u = Matrix::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let v = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        let a = KasaAdapter::from_parts(u, vec![0.7], v, 1.0).unwrap();
        let x = Matrix::zeros(2, 1).unwrap();
        let batch = Batch::regression(x.clone(), Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let fd = finite_difference(&base, &a, &batch, &Regularization::new(1.0, 0.0), 1e-3).unwrap();
        assert!((fd.d_delta_sigma[0] - 1.4).abs() < 1e-12);

        let fd0 = finite_difference(&base, &a, &batch, &Regularization::none(), 1e-3).unwrap();
        assert!(fd0.flatten().iter().all(|&g| g == 0.0));
        assert!(finite_difference(&base, &a, &batch, &Regularization::none(), 0.0).is_err());
    }

    #[test]
    fn doubling_beta_doubles_l2_share() {
        let (base, adapter, batch) = setup(6, 5, 2, 95);
        let l1 = total_loss(&base, &adapter, &batch, &Regularization::new(0.25, 0.5)).unwrap();
        let l2 = total_loss(&base, &adapter, &batch, &Regularization::new(0.5, 0.5)).unwrap();
        let share = |l: &LossBreakdown| l.total - l.l1_task - l.gamma * l.l3_orth;
        assert!((share(&l2) - 2.0 * share(&l1)).abs() <= 1e-12 * share(&l2).abs());
    }
}

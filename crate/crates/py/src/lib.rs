//! Python bindings: `import kasa`.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`).

use kasa_core::linalg::Matrix;
use kasa_core::KasaError;

/// Row lists to a dense matrix; rows must all have the same length.
pub fn matrix_from_rows(rows: Vec<Vec<f64>>) -> Result<Matrix, KasaError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(KasaError::Format(format!("row {i} has {} values, expected {m}", r.len())));
    }
    Matrix::new(n, m, rows.into_iter().flatten().collect())
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[pyo3::pymodule]
mod kasa {
    use kasa_core::harness::{gradcheck_problem, make_task, TaskSpec};
    use kasa_core::model::{AdaptedModel, AdapterSpec, Method};
    use kasa_core::objective::{gradient_check, loss_l2, loss_l3, Regularization};
    use kasa_core::trainer::{self, TrainConfig};
    use kasa_core::{KasaAdapter, KasaError, TruncatedBase};
    use pyo3::exceptions::PyValueError;
    use pyo3::prelude::*;
    use pyo3::types::PyDict;

    use super::{matrix_from_rows, matrix_to_rows};

    fn py_err(e: KasaError) -> PyErr {
        PyValueError::new_err(e.to_string())
    }

    type Rows = Vec<Vec<f64>>;

    /// Thin SVD: returns `(u, sigma, v)` with `matrix = u · diag(sigma) · vᵀ`.
    #[pyfunction]
    fn svd(matrix: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
        let m = matrix_from_rows(matrix).map_err(py_err)?;
        let f = kasa_core::svd(&m).map_err(py_err)?;
        Ok((matrix_to_rows(&f.u), f.sigma, matrix_to_rows(&f.v)))
    }

    /// Drops the `k` smallest singular triplets; returns `(w_world, dropped_energy_norm)`.
    #[pyfunction]
    fn truncate(matrix: Rows, k: usize) -> PyResult<(Rows, f64)> {
        let m = matrix_from_rows(matrix).map_err(py_err)?;
        let t = TruncatedBase::truncate(&m, k).map_err(py_err)?;
        Ok((matrix_to_rows(t.w_world()), t.predicted_error()))
    }

    /// Maximum per-coordinate relative error between analytic and
    /// central-difference gradients on a seeded problem.
    #[pyfunction]
    #[pyo3(signature = (r, n, m, seed=0, k=0, batch=16, beta=1e-4, gamma=1e-3, h=1e-5))]
    #[allow(clippy::too_many_arguments)]
    fn gradcheck(r: usize, n: usize, m: usize, seed: u64, k: usize, batch: usize, beta: f64, gamma: f64, h: f64) -> PyResult<f64> {
        let p = gradcheck_problem(n, m, r, k, batch, seed).map_err(py_err)?;
        let check = gradient_check(&p.base, &p.adapter, &p.batch, &Regularization::new(beta, gamma), h).map_err(py_err)?;
        Ok(check.max_error)
    }

    /// KaSA adapter over a truncated base matrix.
    #[pyclass(name = "Adapter")]
    struct PyAdapter {
        base: TruncatedBase,
        inner: KasaAdapter,
    }

    #[pymethods]
    impl PyAdapter {
        #[new]
        #[pyo3(signature = (w0, r, alpha=None, k=0, seed=0))]
        fn new(w0: Rows, r: usize, alpha: Option<f64>, k: usize, seed: u64) -> PyResult<Self> {
            let w0 = matrix_from_rows(w0).map_err(py_err)?;
            let base = TruncatedBase::truncate(&w0, k).map_err(py_err)?;
            let inner = KasaAdapter::init(&base, r, alpha.unwrap_or(2.0 * r as f64), seed).map_err(py_err)?;
            Ok(Self { base, inner })
        }

        #[getter]
        fn rank(&self) -> usize {
            self.inner.rank()
        }

        #[getter]
        fn eta(&self) -> f64 {
            self.inner.eta()
        }

        #[getter]
        fn delta_sigma(&self) -> Vec<f64> {
            self.inner.delta_sigma().to_vec()
        }

        #[getter]
        fn parameter_count(&self) -> usize {
            self.inner.parameter_count()
        }

        /// Replaces the factors; `alpha` is kept.
        fn set_factors(&mut self, delta_u: Rows, delta_sigma: Vec<f64>, delta_v: Rows) -> PyResult<()> {
            let u = matrix_from_rows(delta_u).map_err(py_err)?;
            let v = matrix_from_rows(delta_v).map_err(py_err)?;
            if u.rows() != self.base.out_dim() || v.rows() != self.base.in_dim() {
                return Err(PyValueError::new_err("factor shapes do not match the base"));
            }
            self.inner = KasaAdapter::from_parts(u, delta_sigma, v, self.inner.alpha()).map_err(py_err)?;
            Ok(())
        }

        /// Applies the adapted map to the columns of `x`.
        fn forward(&self, x: Rows) -> PyResult<Rows> {
            let x = matrix_from_rows(x).map_err(py_err)?;
            Ok(matrix_to_rows(&self.inner.forward(&self.base, &x).map_err(py_err)?))
        }

        fn merge(&self) -> PyResult<Rows> {
            Ok(matrix_to_rows(&self.inner.merge(&self.base).map_err(py_err)?))
        }

        fn delta_w(&self) -> PyResult<Rows> {
            Ok(matrix_to_rows(&self.inner.delta_w().map_err(py_err)?))
        }

        fn l2(&self) -> PyResult<f64> {
            loss_l2(&self.inner).map_err(py_err)
        }

        fn l3(&self) -> f64 {
            loss_l3(&self.inner)
        }

        /// `η · max|Δσ|`.
        fn spectral_norm(&self) -> f64 {
            self.inner.spectral_norm_of_update().value
        }
    }

    /// One training run on the synthetic teacher-student task with the desk
    /// preset; keyword arguments override individual settings.
    #[pyfunction]
    #[pyo3(signature = (method, *, seed=0, steps=None, learning_rate=None, rank=8, truncation_k=8, task_seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        method: &str,
        seed: u64,
        steps: Option<usize>,
        learning_rate: Option<f64>,
        rank: usize,
        truncation_k: usize,
        task_seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method: Method = method.parse().map_err(py_err)?;
        let task = make_task(&TaskSpec {
            seed: task_seed,
            ..TaskSpec::default()
        })
        .map_err(py_err)?;
        let spec = AdapterSpec {
            rank,
            truncation_k,
            alpha: 2.0 * rank as f64,
            ..AdapterSpec::default()
        };
        let mut config = TrainConfig { seed, ..TrainConfig::desk() };
        if let Some(s) = steps {
            config.steps = s;
        }
        if let Some(lr) = learning_rate {
            config.learning_rate = lr;
        }
        let mut model = AdaptedModel::build(method, &task.w0, &spec, seed).map_err(py_err)?;
        let report = py.detach(|| trainer::train(&mut model, &task.data, &config)).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("method", method.as_str())?;
        out.set_item("train_mse", report.train_metric)?;
        out.set_item("test_mse", report.test_metric)?;
        out.set_item("parameter_count", report.parameter_count)?;
        out.set_item("delta_sigma", report.delta_sigma)?;
        out.set_item("total_loss", report.trace.iter().map(|t| t.total).collect::<Vec<_>>())?;
        out.set_item("stream_hash", report.stream_hash)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let m = matrix_from_rows(rows.clone()).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(matrix_to_rows(&m), rows);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(matrix_from_rows(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}

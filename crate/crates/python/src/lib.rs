//! Python bindings. Vectors are lists of floats and matrices are lists of
//! rows; configs and reports cross the boundary as plain dicts.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use metalinreg::bounds::{self, LinRegBoundInputs, SgdSchedule, SmoothnessConstants};
use metalinreg::experiment::{self, ExperimentContext, GridConfig, DEFAULT_MC_TASKS};
use metalinreg::sgd_sim::{self, Method, OracleSettings, VerifyConfig};
use metalinreg::task_model::{self, from_rows, rows};
use metalinreg::{estimators, risk, stats, Error};

create_exception!(metalinreg, MetaLinRegError, PyValueError);
create_exception!(metalinreg, AssumptionViolation, MetaLinRegError);

fn err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.code());
    match e {
        Error::AssumptionViolation(_) => AssumptionViolation::new_err(msg),
        _ => MetaLinRegError::new_err(msg),
    }
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn matrix(r: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let nrows = r.len();
    let ncols = r.first().map_or(0, Vec::len);
    from_rows(&r, nrows, ncols).map_err(err)
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| MetaLinRegError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| MetaLinRegError::new_err(format!("invalid_config: {e}")))
}

#[pyclass(module = "metalinreg", name = "TaskParams", from_py_object)]
#[derive(Clone)]
struct PyTaskParams {
    inner: metalinreg::TaskParams,
}

#[pymethods]
impl PyTaskParams {
    #[new]
    fn new(theta: Vec<f64>, noise_var: f64, q: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = metalinreg::TaskParams::new(vector(theta), noise_var, matrix(q)?).map_err(err)?;
        Ok(PyTaskParams { inner })
    }

    #[staticmethod]
    fn scalar(theta: f64, noise_var: f64, q: f64) -> PyResult<Self> {
        let inner = metalinreg::TaskParams::scalar(theta, noise_var, q).map_err(err)?;
        Ok(PyTaskParams { inner })
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta.iter().copied().collect()
    }

    #[getter]
    fn noise_var(&self) -> f64 {
        self.inner.noise_var
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.q)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn risk(&self, theta: Vec<f64>) -> PyResult<f64> {
        risk::task_risk(&vector(theta), &self.inner).map_err(err)
    }

    fn risk_grad(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(risk::task_risk_grad(&vector(theta), &self.inner).map_err(err)?.iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        format!("TaskParams(theta={:?}, noise_var={})", self.theta(), self.inner.noise_var)
    }
}

/// A finite task distribution; weights default to uniform.
#[pyclass(module = "metalinreg", name = "FiniteDistribution", from_py_object)]
#[derive(Clone)]
struct PyFiniteDistribution {
    inner: metalinreg::FiniteDistribution,
}

#[pymethods]
impl PyFiniteDistribution {
    #[new]
    #[pyo3(signature = (tasks, weights=None))]
    fn new(tasks: Vec<PyTaskParams>, weights: Option<Vec<f64>>) -> PyResult<Self> {
        let tasks: Vec<_> = tasks.into_iter().map(|t| t.inner).collect();
        let inner = match weights {
            Some(w) => metalinreg::FiniteDistribution::new(tasks, w),
            None => metalinreg::FiniteDistribution::uniform(tasks),
        }
        .map_err(err)?;
        Ok(PyFiniteDistribution { inner })
    }

    #[getter]
    fn tasks(&self) -> Vec<PyTaskParams> {
        self.inner.tasks().iter().map(|t| PyTaskParams { inner: t.clone() }).collect()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "metalinreg", name = "MetaDataset", from_py_object)]
#[derive(Clone)]
struct PyMetaDataset {
    inner: metalinreg::MetaDataset,
}

#[pymethods]
impl PyMetaDataset {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| MetaLinRegError::new_err(e.to_string()))?;
        Ok(PyMetaDataset { inner: metalinreg::MetaDataset::from_json(&value).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json().to_string()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p
    }
}

fn distribution(dist: Option<&PyFiniteDistribution>, p: usize) -> metalinreg::TaskDistribution {
    match dist {
        Some(d) => metalinreg::TaskDistribution::Finite(d.inner.clone()),
        None => metalinreg::TaskDistribution::paper_simulation(p),
    }
}

/// Draws `m` tasks with `2n` points each, from `dist` or from the
/// simulation distribution of dimension `p`.
#[pyfunction]
#[pyo3(signature = (m, n, seed, dist=None, p=1))]
fn generate_dataset(m: usize, n: usize, seed: u64, dist: Option<PyFiniteDistribution>, p: usize) -> PyResult<PyMetaDataset> {
    let inner = task_model::generate_dataset(&distribution(dist.as_ref(), p), m, n, seed).map_err(err)?;
    Ok(PyMetaDataset { inner })
}

#[pyfunction]
fn drs_population_risk(theta: Vec<f64>, dist: &PyFiniteDistribution) -> PyResult<f64> {
    risk::drs_population_risk(&vector(theta), &dist.inner).map_err(err)
}

#[pyfunction]
fn maml_population_risk(theta: Vec<f64>, alpha: f64, dist: &PyFiniteDistribution) -> PyResult<f64> {
    risk::maml_population_risk(&vector(theta), alpha, &dist.inner).map_err(err)
}

#[pyfunction]
fn post_adapt_expected_loss(theta: Vec<f64>, alpha: f64, n: usize, dist: &PyFiniteDistribution) -> PyResult<f64> {
    risk::post_adapt_expected_loss(&vector(theta), alpha, n, &dist.inner).map_err(err)
}

#[pyfunction]
fn maml_optimum_post_loss(alpha: f64, dist: &PyFiniteDistribution) -> PyResult<f64> {
    risk::maml_optimum_post_loss(alpha, &dist.inner).map_err(err)
}

#[pyfunction]
fn population_drs_optimum(dist: &PyFiniteDistribution) -> PyResult<Vec<f64>> {
    Ok(estimators::population_drs_optimum(&dist.inner).map_err(err)?.iter().copied().collect())
}

#[pyfunction]
fn population_maml_optimum(dist: &PyFiniteDistribution, alpha: f64) -> PyResult<Vec<f64>> {
    Ok(estimators::population_maml_optimum(&dist.inner, alpha).map_err(err)?.iter().copied().collect())
}

fn estimate<'py>(py: Python<'py>, e: estimators::EstimateResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("theta_hat", e.theta_hat.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("rank_deficient", e.rank_deficient)?;
    d.set_item("min_singular_value", e.min_singular_value)?;
    Ok(d)
}

#[pyfunction]
fn solve_drs<'py>(py: Python<'py>, data: &PyMetaDataset) -> PyResult<Bound<'py, PyDict>> {
    estimate(py, estimators::solve_drs(&data.inner).map_err(err)?)
}

#[pyfunction]
fn solve_maml<'py>(py: Python<'py>, data: &PyMetaDataset, alpha: f64) -> PyResult<Bound<'py, PyDict>> {
    estimate(py, estimators::solve_maml(&data.inner, alpha).map_err(err)?)
}

/// One SGD step `θ − (α/N)(XXᵀθ − XY)`; `x` holds one data point per column.
#[pyfunction]
fn adapt(theta: Vec<f64>, x: Vec<Vec<f64>>, y: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let out = estimators::adapt(&vector(theta), &matrix(x)?, &vector(y), alpha).map_err(err)?;
    Ok(out.iter().copied().collect())
}

#[pyfunction]
fn drs_complexity_bound(constants: &Bound<'_, PyAny>, lambda_drs: f64, schedule: &Bound<'_, PyAny>) -> PyResult<f64> {
    let c: SmoothnessConstants = from_py(constants)?;
    let s: SgdSchedule = from_py(schedule)?;
    bounds::drs_complexity_bound(&c, lambda_drs, &s).map_err(err)
}

#[pyfunction]
fn maml_complexity_bound(constants: &Bound<'_, PyAny>, lambda_maml: f64, schedule: &Bound<'_, PyAny>) -> PyResult<f64> {
    let c: SmoothnessConstants = from_py(constants)?;
    let s: SgdSchedule = from_py(schedule)?;
    bounds::maml_complexity_bound(&c, lambda_maml, &s).map_err(err)
}

/// Exact statistical-bound inputs of a finite distribution, as a dict.
#[pyfunction]
fn linreg_bound_inputs<'py>(py: Python<'py>, dist: &PyFiniteDistribution, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    let inputs = LinRegBoundInputs::from_finite(&dist.inner, alpha).map_err(err)?;
    let d = to_py(py, &inputs)?;
    // JSON has no infinity; set the unbounded fields directly.
    d.set_item("xi", inputs.xi)?;
    d.set_item("phi", inputs.phi)?;
    Ok(d)
}

fn bound_inputs(obj: &Bound<'_, PyDict>) -> PyResult<LinRegBoundInputs> {
    let copy = obj.copy()?;
    let take = |key: &str| -> PyResult<f64> {
        let v = copy.get_item(key)?.map(|v| v.extract::<Option<f64>>()).transpose()?.flatten();
        copy.set_item(key, 0.0)?;
        Ok(v.unwrap_or(f64::INFINITY))
    };
    let (xi, phi) = (take("xi")?, take("phi")?);
    let mut inputs: LinRegBoundInputs = from_py(copy.as_any())?;
    inputs.xi = xi;
    inputs.phi = phi;
    Ok(inputs)
}

#[pyfunction]
fn drs_statistical_bound(inputs: &Bound<'_, PyDict>, m: usize, n: usize) -> PyResult<f64> {
    bounds::drs_statistical_bound(&bound_inputs(inputs)?, m, n).map_err(err)
}

#[pyfunction]
fn maml_statistical_bound(inputs: &Bound<'_, PyDict>, m: usize, n: usize, alpha: f64) -> PyResult<f64> {
    bounds::maml_statistical_bound(&bound_inputs(inputs)?, m, n, alpha).map_err(err)
}

#[pyfunction]
fn bernstein_rhs_symmetric(beta: f64, var_norm: f64, m: usize, p: usize, rho: f64) -> PyResult<f64> {
    bounds::bernstein_rhs_symmetric(beta, var_norm, m, p, rho).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (beta, n, p, rho, subgauss_k=1.0, univ_c=1.0))]
fn covariance_rhs(beta: f64, n: usize, p: usize, rho: f64, subgauss_k: f64, univ_c: f64) -> PyResult<f64> {
    bounds::covariance_rhs(beta, subgauss_k, univ_c, n, p, rho).map_err(err)
}

/// Returns `(t, dof, p_greater)`.
#[pyfunction]
fn welch_test(mean_a: f64, var_a: f64, n_a: usize, mean_b: f64, var_b: f64, n_b: usize) -> PyResult<(f64, f64, f64)> {
    let r = stats::welch_test(mean_a, var_a, n_a, mean_b, var_b, n_b).map_err(err)?;
    Ok((r.t_value, r.dof, r.p_greater))
}

#[pyfunction]
fn compile_seed_stats(means: Vec<f64>, vars: Vec<f64>) -> PyResult<(f64, f64)> {
    stats::compile_seed_stats(&means, &vars).map_err(err)
}

#[pyfunction]
fn log_spaced(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    experiment::log_spaced(lo, hi, count)
}

#[pyfunction]
#[pyo3(signature = (m, n, alpha, reps, seed, dist=None, p=1, mc_tasks=DEFAULT_MC_TASKS, mc_seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_cell<'py>(
    py: Python<'py>,
    m: usize,
    n: usize,
    alpha: f64,
    reps: usize,
    seed: u64,
    dist: Option<PyFiniteDistribution>,
    p: usize,
    mc_tasks: usize,
    mc_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let dist = distribution(dist.as_ref(), p);
    let cell = py
        .detach(|| {
            let ctx = ExperimentContext::new(dist, mc_tasks, mc_seed)?;
            experiment::run_cell(&ctx, m, n, alpha, reps, seed)
        })
        .map_err(err)?;
    to_py(py, &cell)
}

/// Runs a contour grid from a config dict; missing keys take the defaults.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_grid<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let config: GridConfig = match config {
        Some(c) => from_py(c)?,
        None => GridConfig::default(),
    };
    let grid = py.detach(|| experiment::run_grid(&config)).map_err(err)?;
    to_py(py, &grid)
}

#[pyfunction]
#[pyo3(signature = (method, dist, oracle, schedule, theta0=None, seeds=50, seed=0, optimize_rate=true))]
#[allow(clippy::too_many_arguments)]
fn verify_complexity_bound<'py>(
    py: Python<'py>,
    method: &str,
    dist: &PyFiniteDistribution,
    oracle: &Bound<'py, PyAny>,
    schedule: &Bound<'py, PyAny>,
    theta0: Option<Vec<f64>>,
    seeds: usize,
    seed: u64,
    optimize_rate: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let method = match method {
        "drs" => Method::Drs,
        "maml" => Method::Maml,
        other => return Err(MetaLinRegError::new_err(format!("invalid_argument: unknown method {other:?}"))),
    };
    let oracle: OracleSettings = from_py(oracle)?;
    let sched: SgdSchedule = from_py(schedule)?;
    let theta0 = theta0.map_or_else(|| DVector::zeros(dist.inner.dim()), vector);
    let config = VerifyConfig {
        method,
        dist: dist.inner.clone(),
        oracle,
        sched,
        optimize_rate,
        theta0,
        seeds,
        seed,
    };
    let report = py.detach(|| sgd_sim::verify_complexity_bound(&config)).map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "metalinreg")]
fn metalinreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MetaLinRegError", m.py().get_type::<MetaLinRegError>())?;
    m.add("AssumptionViolation", m.py().get_type::<AssumptionViolation>())?;
    m.add_class::<PyTaskParams>()?;
    m.add_class::<PyFiniteDistribution>()?;
    m.add_class::<PyMetaDataset>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(drs_population_risk, m)?)?;
    m.add_function(wrap_pyfunction!(maml_population_risk, m)?)?;
    m.add_function(wrap_pyfunction!(post_adapt_expected_loss, m)?)?;
    m.add_function(wrap_pyfunction!(maml_optimum_post_loss, m)?)?;
    m.add_function(wrap_pyfunction!(population_drs_optimum, m)?)?;
    m.add_function(wrap_pyfunction!(population_maml_optimum, m)?)?;
    m.add_function(wrap_pyfunction!(solve_drs, m)?)?;
    m.add_function(wrap_pyfunction!(solve_maml, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(drs_complexity_bound, m)?)?;
    m.add_function(wrap_pyfunction!(maml_complexity_bound, m)?)?;
    m.add_function(wrap_pyfunction!(linreg_bound_inputs, m)?)?;
    m.add_function(wrap_pyfunction!(drs_statistical_bound, m)?)?;
    m.add_function(wrap_pyfunction!(maml_statistical_bound, m)?)?;
    m.add_function(wrap_pyfunction!(bernstein_rhs_symmetric, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(welch_test, m)?)?;
    m.add_function(wrap_pyfunction!(compile_seed_stats, m)?)?;
    m.add_function(wrap_pyfunction!(log_spaced, m)?)?;
    m.add_function(wrap_pyfunction!(run_cell, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(verify_complexity_bound, m)?)?;
    Ok(())
}

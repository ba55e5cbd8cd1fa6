//! Python bindings: configuration, single runs, sweeps, the verification
//! suite and the privacy arithmetic.

use std::path::PathBuf;

use pyo3::exceptions::{PyNotImplementedError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedmu2::harness::{self, ExperimentConfig, Grid};
use fedmu2::numkit::{Ball, Vector};
use fedmu2::objectives::QuadraticSpec;
use fedmu2::{privacy, verify, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Unsupported(_) => PyNotImplementedError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::DataExhausted { .. } | Error::Protocol(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Experiment configuration in the flat `key = value` format.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.run.algorithm.name()
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.run.rounds
    }

    #[getter]
    fn machines(&self) -> usize {
        self.inner.run.machines
    }

    #[getter]
    fn participants(&self) -> usize {
        self.inner.run.participants
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.run.rho
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(algorithm={}, T={}, M={}, m={}, rho={}, seed={})",
            self.algorithm(),
            self.rounds(),
            self.machines(),
            self.participants(),
            self.rho(),
            self.seed()
        )
    }
}

/// Outcome of one run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    #[pyo3(get)]
    algorithm: String,
    #[pyo3(get)]
    x_out: Vec<f64>,
    #[pyo3(get)]
    eta: f64,
    #[pyo3(get)]
    grad_evals: u64,
    #[pyo3(get)]
    rho_spent: Vec<f64>,
    #[pyo3(get)]
    epsilon: f64,
    #[pyo3(get)]
    test_acc: Option<f64>,
    #[pyo3(get)]
    excess_loss: Option<f64>,
    #[pyo3(get)]
    error_sq: Vec<f64>,
    #[pyo3(get)]
    participation: Vec<Vec<usize>>,
    rows: Vec<fedmu2::fedcore::MetricsRow>,
    summary: String,
}

#[pymethods]
impl PyRunResult {
    /// Metrics rows as dictionaries keyed by the CSV column names.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("round", r.round)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("test_acc", r.test_acc)?;
                d.set_item("excess_loss", r.excess_loss)?;
                d.set_item("eps_err_sq", r.eps_err_sq)?;
                d.set_item("rho_spent_max", r.rho_spent_max)?;
                d.set_item("grad_evals", r.grad_evals)?;
                d.set_item("wall_ms", r.wall_ms)?;
                Ok(d)
            })
            .collect()
    }

    fn metrics_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        harness::write_metrics(&mut buf, &self.rows).map_err(|e| to_py(e.into()))?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("RunResult({})", self.summary)
    }
}

fn result_from(outcome: harness::ExperimentOutcome) -> PyRunResult {
    let out = outcome.output;
    let s = outcome.summary;
    PyRunResult {
        algorithm: s.algorithm.name().into(),
        x_out: out.x_out.to_vec(),
        eta: out.eta,
        grad_evals: out.grad_evals,
        rho_spent: (0..out.ledger.accounts()).map(|i| out.ledger.spent(i)).collect(),
        epsilon: s.epsilon,
        test_acc: s.test_acc,
        excess_loss: s.excess_loss,
        error_sq: out.error_sq,
        participation: out.participation,
        rows: out.metrics,
        summary: s.line(),
    }
}

/// Runs one experiment; writes the metrics CSV when the config sets `out`.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let outcome = py.detach(move || harness::run_experiment(&cfg)).map_err(to_py)?;
    Ok(result_from(outcome))
}

type SweepRow = (Vec<(String, String)>, PyRunResult);

/// Runs `config` over the cartesian product of `grid` (`key = v1, v2` lines).
/// Returns `(assignment, result)` pairs in grid order.
#[pyfunction]
fn sweep(py: Python<'_>, config: &PyConfig, grid: &str) -> PyResult<Vec<SweepRow>> {
    let grid = Grid::parse(grid).map_err(to_py)?;
    let cfg = config.inner.clone();
    let points = py.detach(move || harness::sweep(&cfg, &grid)).map_err(to_py)?;
    Ok(points
        .into_iter()
        .map(|p| (p.assignment, result_from(p.outcome)))
        .collect())
}

/// Runs the verification suite (or one named check); one dict per report.
#[pyfunction]
#[pyo3(signature = (check = None))]
fn run_checks<'py>(py: Python<'py>, check: Option<String>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let reports = py
        .detach(move || match check {
            Some(name) => verify::run_check(&name),
            None => verify::run_all(),
        })
        .map_err(to_py)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("check", r.name)?;
            d.set_item("passed", r.passed)?;
            d.set_item("statistic", r.statistic)?;
            d.set_item("bound", r.bound)?;
            d.set_item("stderr", r.stderr)?;
            d.set_item("trials", r.trials)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn project(v: Vec<f64>, center: Vec<f64>, radius: f64) -> PyResult<Vec<f64>> {
    let ball = Ball::new(Vector::new(center).map_err(to_py)?, radius).map_err(to_py)?;
    let p = ball.project(&Vector::new(v).map_err(to_py)?).map_err(to_py)?;
    Ok(p.into_inner())
}

#[pyfunction]
fn zcdp_to_dp(rho: f64, delta: f64) -> PyResult<f64> {
    privacy::zcdp_to_dp(rho, delta).map_err(to_py)
}

#[pyfunction]
fn renyi_gaussian(alpha: f64, delta_norm: f64, sigma: f64) -> PyResult<f64> {
    privacy::renyi_gaussian(alpha, delta_norm, sigma).map_err(to_py)
}

/// Per-machine noise variance for the `n`-th participation.
#[pyfunction]
fn calibrate_untrusted(s: f64, rounds: usize, rho: f64, n: usize) -> PyResult<f64> {
    privacy::calibrate_untrusted(s, rounds, rho, n).map_err(to_py)
}

#[pyfunction]
fn calibrate_trusted(s: f64, rounds: usize, rho: f64, m: usize) -> PyResult<f64> {
    privacy::calibrate_trusted(s, rounds, rho, m).map_err(to_py)
}

/// Privacy level spent by one machine given its per-release variances.
#[pyfunction]
fn account_machine(s: f64, variances: Vec<f64>) -> PyResult<f64> {
    privacy::account_machine(s, &variances).map_err(to_py)
}

/// Exact constants of the synthetic quadratic as a dict.
#[pyfunction]
#[pyo3(signature = (dim = 10, machines = 10, smoothness = 1.0, sample_noise = 0.5, heterogeneity = 0.5, curvature_jitter = 0.0, radius = 1.0, optimum_offset = 0.0))]
#[allow(clippy::too_many_arguments)]
fn quadratic_constants<'py>(
    py: Python<'py>,
    dim: usize,
    machines: usize,
    smoothness: f64,
    sample_noise: f64,
    heterogeneity: f64,
    curvature_jitter: f64,
    radius: f64,
    optimum_offset: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = QuadraticSpec {
        dim,
        machines,
        smoothness,
        sample_noise,
        heterogeneity,
        curvature_jitter,
        radius,
        optimum_offset,
    };
    let c = fedmu2::QuadraticProblem::new(spec)
        .and_then(|p| p.constants())
        .map_err(to_py)?;
    let d = PyDict::new(py);
    for (k, v) in [
        ("G", c.g),
        ("L", c.l),
        ("D", c.d),
        ("S", c.s),
        ("sigma", c.sigma),
        ("sigma_L", c.sigma_l),
        ("xi", c.xi),
        ("xi_L", c.xi_l),
        ("sigma_tilde", c.sigma_tilde),
        ("xi_tilde", c.xi_tilde),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "fedmu2")]
fn fedmu2_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(zcdp_to_dp, m)?)?;
    m.add_function(wrap_pyfunction!(renyi_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_untrusted, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_trusted, m)?)?;
    m.add_function(wrap_pyfunction!(account_machine, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_constants, m)?)?;
    m.add("METRICS_HEADER", harness::METRICS_HEADER)?;
    Ok(())
}

//! Python bindings for `elm_mpc`. Matrices travel as lists of rows.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use elm_mpc::commands::{self, Overrides, SavedModel};
use elm_mpc::config::RunConfig;
use elm_mpc::elm::ElmModel;
use elm_mpc::qp::{self as qp_core, QpOptions, QpProblem};
use elm_mpc::sysid::{self, AprbsSpec, NarxConfig};
use elm_mpc::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 | 3 => PyValueError::new_err(e.to_string()),
        5 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.into_iter().flatten()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Trained extreme learning machine with its NARX lags.
#[pyclass(name = "ElmModel", module = "elm_mpc_py")]
struct PyElmModel {
    inner: ElmModel,
    narx: NarxConfig,
    lambda: f64,
}

#[pymethods]
impl PyElmModel {
    /// Reads a model written by `train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let s = SavedModel::load(&path).map_err(to_py)?;
        Ok(PyElmModel {
            inner: s.model,
            narx: s.narx,
            lambda: s.lambda,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let saved = SavedModel {
            model: self.inner.clone(),
            narx: self.narx,
            lambda: self.lambda,
        };
        saved.to_doc(&[]).save(path).map_err(to_py)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let y = self.inner.predict(&DVector::from_vec(x)).map_err(to_py)?;
        Ok(y.iter().copied().collect())
    }

    /// Output-by-input sensitivity matrix at `x`.
    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self.inner.jacobian(&DVector::from_vec(x)).map_err(to_py)?;
        Ok(rows(&j))
    }

    /// One-step-ahead predictions for the framed sequences.
    fn predict_osap(&self, u: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let data = sysid::build_narx(&matrix(u)?, &matrix(y)?, &self.narx).map_err(to_py)?;
        Ok(rows(&sysid::predict_osap(&self.inner, &data).map_err(to_py)?))
    }

    /// Free-running prediction seeded with `y_init` (one row per output lag).
    fn rollout(&self, u_hist: Vec<Vec<f64>>, y_init: Vec<Vec<f64>>, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        let out = sysid::rollout_msap(&self.inner, &self.narx, &matrix(u_hist)?, &matrix(y_init)?, steps)
            .map_err(to_py)?;
        Ok(rows(&out))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        self.inner.hidden_size()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn order(&self) -> (usize, usize) {
        (self.narx.input_lags, self.narx.output_lags)
    }

    #[getter]
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn __repr__(&self) -> String {
        format!(
            "ElmModel(inputs={}, outputs={}, hidden={}, order=({}, {}))",
            self.inner.input_dim(),
            self.inner.output_dim(),
            self.inner.hidden_size(),
            self.narx.input_lags,
            self.narx.output_lags
        )
    }
}

/// Fits an ELM on equal-lag NARX features of `u` and `y`.
#[pyfunction]
#[pyo3(signature = (u, y, hidden, lambda_, order = 1, seed = 0))]
fn fit(u: Vec<Vec<f64>>, y: Vec<Vec<f64>>, hidden: usize, lambda_: f64, order: usize, seed: u64) -> PyResult<PyElmModel> {
    let (u, y) = (matrix(u)?, matrix(y)?);
    let narx = NarxConfig::with_order(order, u.ncols(), y.ncols()).map_err(to_py)?;
    let inner = sysid::fit_narx(&u, &y, &narx, hidden, lambda_, seed).map_err(to_py)?;
    Ok(PyElmModel { inner, narx, lambda: lambda_ })
}

#[pyfunction]
#[pyo3(signature = (level_lo, level_hi, length, seed, hold_min = 5, hold_max = 30))]
fn aprbs(level_lo: Vec<f64>, level_hi: Vec<f64>, length: usize, seed: u64, hold_min: usize, hold_max: usize) -> PyResult<Vec<Vec<f64>>> {
    let spec = AprbsSpec {
        level_lo,
        level_hi,
        hold_min,
        hold_max,
        length,
        seed,
    };
    Ok(rows(&sysid::gen_aprbs(&spec).map_err(to_py)?))
}

#[pyfunction]
fn rmse(actual: Vec<Vec<f64>>, predicted: Vec<Vec<f64>>) -> PyResult<f64> {
    sysid::rmse(&matrix(actual)?, &matrix(predicted)?).map_err(to_py)
}

/// Minimizes `x'Hx/2 + f'x` subject to `A x <= b`.
///
/// `method` is `"dual"` for projected-gradient dual ascent or `"exact"` for
/// active-set enumeration (small problems only).
#[pyfunction]
#[pyo3(signature = (hessian, linear, a = None, b = None, method = "dual", max_iter = 20_000, tol = 1e-8))]
#[allow(clippy::too_many_arguments)]
fn solve_qp<'py>(
    py: Python<'py>,
    hessian: Vec<Vec<f64>>,
    linear: Vec<f64>,
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<f64>>,
    method: &str,
    max_iter: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let h = matrix(hessian)?;
    let f = DVector::from_vec(linear);
    let problem = match (a, b) {
        (Some(a), Some(b)) => QpProblem::new(h, f, matrix(a)?, DVector::from_vec(b)),
        (None, None) => QpProblem::unconstrained(h, f),
        _ => return Err(PyValueError::new_err("a and b must be given together")),
    }
    .map_err(to_py)?;
    let sol = match method {
        "dual" => {
            let opts = QpOptions {
                max_iter,
                tol,
                ..QpOptions::default()
            };
            qp_core::solve_fast(&problem, &opts)
        }
        "exact" => qp_core::solve_oracle(&problem),
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    }
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("x", sol.x.iter().copied().collect::<Vec<_>>())?;
    d.set_item("multipliers", sol.lambda.iter().copied().collect::<Vec<_>>())?;
    d.set_item("objective", sol.objective)?;
    d.set_item("iterations", sol.iterations)?;
    d.set_item("status", format!("{:?}", sol.status))?;
    d.set_item("kkt_residual", sol.kkt_residual())?;
    d.set_item("active_set", sol.active_set())?;
    Ok(d)
}

fn load_config(config: PathBuf, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::load(&config).map_err(to_py)?;
    Overrides { seed, out_dir }.apply(&mut cfg);
    Ok(cfg)
}

fn paths(p: Vec<PathBuf>) -> Vec<String> {
    p.into_iter().map(|p| p.to_string_lossy().into_owned()).collect()
}

/// Same as `elm-mpc gen-data`; returns the written files.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None, seed = None))]
fn gen_data(config: PathBuf, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Vec<String>> {
    let cfg = load_config(config, out_dir, seed)?;
    Ok(paths(commands::cmd_gen_data(&cfg).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (config, out_dir = None, seed = None))]
fn train(config: PathBuf, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Vec<String>> {
    let cfg = load_config(config, out_dir, seed)?;
    Ok(paths(commands::cmd_train(&cfg).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (config, out_dir = None, seed = None))]
fn evaluate<'py>(py: Python<'py>, config: PathBuf, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(config, out_dir, seed)?;
    let (m, files) = commands::cmd_eval(&cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("osap_rmse", m.osap_rmse)?;
    d.set_item("osap_channel_rmse", m.osap_channel_rmse)?;
    d.set_item("msap_rmse", m.msap_rmse)?;
    d.set_item("horizon", m.horizon)?;
    d.set_item("files", paths(files))?;
    Ok(d)
}

/// Closed-loop run; the dict holds per-cycle lists plus the written files.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None, seed = None))]
fn simulate<'py>(py: Python<'py>, config: PathBuf, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(config, out_dir, seed)?;
    let out = commands::cmd_simulate(&cfg).map_err(to_py)?;
    let t = &out.trace;
    let col = |f: &dyn Fn(&elm_mpc::plant::TraceRow) -> Vec<f64>| t.rows.iter().map(f).collect::<Vec<_>>();
    let d = PyDict::new(py);
    d.set_item("status", t.status.as_str())?;
    d.set_item("outputs", t.outputs.clone())?;
    d.set_item("reference", col(&|r| r.reference.iter().copied().collect()))?;
    d.set_item("state", col(&|r| r.state.iter().copied().collect()))?;
    d.set_item("measured", col(&|r| r.measured.iter().copied().collect()))?;
    d.set_item("input", col(&|r| r.input.iter().copied().collect()))?;
    d.set_item("files", paths(out.files))?;
    Ok(d)
}

#[pymodule]
fn elm_mpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", commands::VERSION)?;
    m.add_class::<PyElmModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(aprbs, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}

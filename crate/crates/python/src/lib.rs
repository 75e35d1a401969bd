//! Python bindings: the weighting rule, the oracle and whole runs from TOML text.

use std::path::PathBuf;

use feddwa::config::{parse_raw, resolve, Overrides};
use feddwa::dwa::{self, CrossDistanceMatrix};
use feddwa::experiment::{run_experiment, summary_json};
use feddwa::fedcore::run;
use feddwa::numkit::{self, ParamVector, SquareMatrix};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: feddwa::Error) -> PyErr {
    if e.is_config() || matches!(
        e,
        feddwa::Error::InvalidArgument(_)
            | feddwa::Error::Dimension(_)
            | feddwa::Error::LayoutMismatch(_)
            | feddwa::Error::Empty(_)
    ) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn vector(v: Vec<f64>) -> PyResult<ParamVector> {
    ParamVector::from_flat(v).map_err(to_py)
}

/// Squared Euclidean distance between two flat parameter vectors.
#[pyfunction]
fn sq_dist(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    numkit::sq_dist(&vector(a)?, &vector(b)?).map_err(to_py)
}

/// Normalized inverse squared distances.
#[pyfunction]
fn weights_from_sq_dists(d: Vec<f64>) -> PyResult<Vec<f64>> {
    dwa::weights_from_sq_dists(&d).map_err(to_py)
}

/// Weight row of one client from its guidance model and the uploaded models.
#[pyfunction]
fn compute_weights(guidance: Vec<f64>, models: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let models = models.into_iter().map(vector).collect::<PyResult<Vec<_>>>()?;
    dwa::compute_weights(&vector(guidance)?, &models).map_err(to_py)
}

#[pyfunction]
fn top_k(row: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    dwa::top_k(&row, k).map_err(to_py)
}

#[pyfunction]
fn project_simplex(v: Vec<f64>) -> Vec<f64> {
    dwa::project_simplex(&v)
}

/// Returns the three terms of `||trained - eta * grad - model_j||^2`.
#[pyfunction]
fn decompose_distance(trained: Vec<f64>, eta: f64, grad: Vec<f64>, model_j: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    dwa::decompose_distance(&vector(trained)?, eta, &vector(grad)?, &vector(model_j)?).map_err(to_py)
}

/// Minimizes `p' W p` over the simplex for a symmetric PSD matrix given as rows.
#[pyfunction]
fn oracle_solve<'py>(py: Python<'py>, matrix: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    let m = SquareMatrix::from_rows(n, matrix.concat()).map_err(to_py)?;
    let w = CrossDistanceMatrix::from_matrix(m).map_err(to_py)?;
    let s = dwa::oracle_solve_full(&w).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("weights", s.weights)?;
    out.set_item("objective", s.objective)?;
    out.set_item("unique", s.unique)?;
    out.set_item("alternative", s.alternative)?;
    Ok(out)
}

/// Runs one experiment described by TOML text and returns the summary as a dict.
///
/// With `out`, the usual files are written there; without it nothing touches disk.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run_config<'py>(py: Python<'py>, config: &str, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = resolve(parse_raw(config).map_err(to_py)?, &Overrides::default()).map_err(to_py)?;
    let json = py
        .detach(|| -> feddwa::Result<String> {
            match out {
                Some(dir) => {
                    cfg.out = dir;
                    let r = run_experiment(&cfg)?;
                    summary_json(&cfg, &r.outcome)
                }
                None => {
                    let data = cfg.build_data()?;
                    let o = run(&cfg.engine_config(&data), &data)?;
                    summary_json(&cfg, &o)
                }
            }
        })
        .map_err(to_py)?;
    py.import("json")?.call_method1("loads", (json,))
}

#[pymodule]
fn feddwa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sq_dist, m)?)?;
    m.add_function(wrap_pyfunction!(weights_from_sq_dists, m)?)?;
    m.add_function(wrap_pyfunction!(compute_weights, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_distance, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}

//! Python bindings: metrics, losses, selection, models, and the experiment
//! commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use calprio::calibration::{self, LabelDistribution};
use calprio::expcli;
use calprio::metrics::{self, EntropyScore};
use calprio::models::{self, ModelConfig};
use calprio::prioritization;
use calprio::trainer;
use calprio::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Dimension(_) | Error::Contract(_) | Error::Data(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// ECE with equal-width bins; returns `{"ece", "total", "bins": [...]}`.
#[pyfunction]
#[pyo3(signature = (probs, labels, num_bins = metrics::DEFAULT_ECE_BINS))]
fn compute_ece<'py>(py: Python<'py>, probs: Vec<Vec<f64>>, labels: Vec<usize>, num_bins: usize) -> PyResult<Bound<'py, PyAny>> {
    let report = metrics::compute_ece(&matrix(probs)?, &labels, num_bins).map_err(to_py)?;
    json_to_py(py, &report)
}

#[pyfunction]
fn accuracy(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&matrix(probs)?, &labels).map_err(to_py)
}

/// Natural-log entropy of each probability row.
#[pyfunction]
fn predictive_entropy(probs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(metrics::predictive_entropy(&matrix(probs)?).into_iter().map(|s| s.entropy).collect())
}

/// Ids of the `k` highest entropies, ties to the smaller id, sorted.
#[pyfunction]
fn select_topk(entropies: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    let scores: Vec<EntropyScore> = entropies
        .into_iter()
        .enumerate()
        .map(|(id, entropy)| EntropyScore { id, entropy })
        .collect();
    prioritization::select_topk(&scores, k).map_err(to_py)
}

#[pyfunction]
fn overlap_fraction(previous: Vec<usize>, current: Vec<usize>) -> PyResult<f64> {
    prioritization::overlap_fraction(&previous, &current).map_err(to_py)
}

#[pyfunction]
fn class_histogram(ids: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> PyResult<Vec<usize>> {
    prioritization::class_histogram(&ids, &labels, num_classes).map_err(to_py)
}

#[pyfunction]
fn balance_ratio(histogram: Vec<usize>) -> f64 {
    prioritization::balance_ratio(&histogram)
}

#[pyfunction]
#[pyo3(signature = (t, total, lr0, lr_min = 0.0))]
fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> PyResult<f64> {
    trainer::cosine_lr(t, total, lr0, lr_min).map_err(to_py)
}

#[pyfunction]
fn smooth_labels(labels: Vec<usize>, num_classes: usize, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    let onehot = LabelDistribution::one_hot(&labels, num_classes).map_err(to_py)?;
    let smoothed = calibration::smooth_labels(&onehot, alpha, num_classes).map_err(to_py)?;
    Ok(rows(smoothed.tensor()))
}

/// Mean cross-entropy of probability rows against soft targets.
#[pyfunction]
fn cross_entropy(probs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
    let t = LabelDistribution::new(matrix(targets)?).map_err(to_py)?;
    calibration::cross_entropy(&matrix(probs)?, &t).map_err(to_py)
}

#[pyfunction]
fn focal_loss(probs: Vec<Vec<f64>>, labels: Vec<usize>, gamma: f64) -> PyResult<f64> {
    let p = matrix(probs)?;
    let t = LabelDistribution::one_hot(&labels, p.row_len()).map_err(to_py)?;
    calibration::focal_loss(&p, &t, gamma).map_err(to_py)
}

/// Returns `(features, labels)` with one flattened feature row per sample.
#[pyfunction]
#[pyo3(signature = (num_classes, n, dims, separation, seed = 0))]
fn make_synthetic(num_classes: usize, n: usize, dims: Vec<usize>, separation: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = calprio::data::make_synthetic(num_classes, n, &dims, separation, seed).map_err(to_py)?;
    let width = ds.features().len() / ds.len();
    Ok((ds.features().data().chunks(width).map(<[f64]>::to_vec).collect(), ds.labels().to_vec()))
}

/// A classifier: an MLP or a small residual CNN.
#[pyclass(name = "Model")]
struct PyModel {
    inner: models::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (input_dim, width, depth, num_classes, seed = 0))]
    fn mlp(input_dim: usize, width: usize, depth: usize, num_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = models::Model::build(ModelConfig::mlp(input_dim, width, depth, num_classes, seed)).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (input_shape, width, blocks, num_classes, seed = 0, stem_stride = 1))]
    fn rescnn(
        input_shape: [usize; 3],
        width: usize,
        blocks: usize,
        num_classes: usize,
        seed: u64,
        stem_stride: usize,
    ) -> PyResult<Self> {
        let config = ModelConfig::rescnn(input_shape, width, blocks, num_classes, seed).with_stem_stride(stem_stride);
        Ok(PyModel {
            inner: models::Model::build(config).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = models::load_checkpoint(&path).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    /// Class posteriors for flattened input rows.
    fn predict_proba(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(inputs)?;
        let mut shape = vec![x.rows()];
        shape.extend(self.inner.config().input_shape.iter());
        let x = x.reshape(shape).map_err(to_py)?;
        Ok(rows(&self.inner.predict_proba(&x).map_err(to_py)?))
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, params={})", self.inner.config().kind, self.inner.param_count())
    }
}

/// Parses and validates a JSON config file; returns the materialized config.
#[pyfunction]
fn parse_config<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let c = expcli::parse_config(&path).map_err(to_py)?;
    json_to_py(py, &c)
}

/// Trains one run into `out` and returns the final report.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let c = expcli::parse_config(&config).map_err(to_py)?;
    let outcome = py.detach(|| expcli::cmd_train(&c, &out)).map_err(to_py)?;
    json_to_py(py, &outcome.report)
}

/// Writes the report bundle for a run directory.
#[pyfunction]
fn report<'py>(py: Python<'py>, run: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let b = expcli::cmd_report(&run).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("files", b.files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())?;
    d.set_item("warnings", b.warnings)?;
    d.set_item("complete", b.complete)?;
    d.set_item("mean_balance_ratio", b.mean_balance_ratio)?;
    d.set_item("mean_overlap", b.mean_overlap)?;
    Ok(d)
}

#[pymodule]
fn calprio_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_ece, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(predictive_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(select_topk, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(class_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(balance_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_labels, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_class::<PyModel>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

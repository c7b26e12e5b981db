//! Python bindings: `import taskfuse`.
//!
//! Tensors cross the boundary as flat lists of floats plus a shape. Reports
//! come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use ::taskfuse as tf;

use tf::analysis::{self, MethodScores, MetricTable};
use tf::error::ErrorKind;
use tf::partition::{self as part, AssignObjective, PartitionConfig, PartitionRecord};
use tf::sim::{self, MagnitudeDist, SimConfig};
use tf::{
    Branch, Dtype, FusionMode, MissingTensorPolicy, NamedTensor, TaskVector, TensorFilter,
    ZeroSignPolicy,
};

fn py_err(e: tf::Error) -> PyErr {
    match e.kind() {
        ErrorKind::Io => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn task_vectors(taus: Vec<Vec<f32>>) -> Vec<TaskVector> {
    taus.into_iter().map(TaskVector::from).collect()
}

/// A memory-mapped checkpoint.
#[pyclass(name = "Checkpoint", module = "taskfuse", frozen)]
struct PyCheckpoint {
    inner: tf::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: tf::open_checkpoint(path).map_err(py_err)?,
        })
    }

    /// Tensor names in file order.
    fn names(&self) -> Vec<String> {
        self.inner.tensors().iter().map(|t| t.name.clone()).collect()
    }

    fn shape(&self, name: &str) -> PyResult<Vec<usize>> {
        self.meta(name).map(|m| m.shape.clone())
    }

    fn dtype(&self, name: &str) -> PyResult<&'static str> {
        self.meta(name).map(|m| m.dtype.as_str())
    }

    /// Returns `(values, shape)` with values widened to float.
    fn read(&self, name: &str) -> PyResult<(Vec<f32>, Vec<usize>)> {
        self.inner.read_tensor_f32(name).map_err(py_err)
    }

    fn metadata(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.metadata().clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.contains(name)
    }

    fn __repr__(&self) -> String {
        match self.inner.source() {
            Some(p) => format!("Checkpoint({:?}, {} tensors)", p.display().to_string(), self.inner.len()),
            None => format!("Checkpoint(<memory>, {} tensors)", self.inner.len()),
        }
    }
}

impl PyCheckpoint {
    fn meta(&self, name: &str) -> PyResult<&tf::TensorMeta> {
        self.inner
            .meta(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown tensor name {name:?}")))
    }
}

#[pyclass(name = "FusionConfig", module = "taskfuse", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFusionConfig {
    inner: tf::FusionConfig,
}

#[pymethods]
impl PyFusionConfig {
    #[new]
    #[pyo3(signature = (mode="full", beta=1.0, delta=None, include=vec![], exclude=vec![], missing="passthrough", zero_eps=None))]
    fn new(
        mode: &str,
        beta: f64,
        delta: Option<f64>,
        include: Vec<String>,
        exclude: Vec<String>,
        missing: &str,
        zero_eps: Option<f32>,
    ) -> PyResult<Self> {
        let mode: FusionMode = mode.parse().map_err(py_err)?;
        let missing_tensor_policy = match missing {
            "passthrough" => MissingTensorPolicy::Passthrough,
            "error" => MissingTensorPolicy::Error,
            other => return Err(PyValueError::new_err(format!("unknown missing-tensor policy {other:?}"))),
        };
        Ok(PyFusionConfig {
            inner: tf::FusionConfig {
                mode,
                delta,
                beta,
                zero_sign_policy: zero_eps.map_or(ZeroSignPolicy::Positive, ZeroSignPolicy::EpsilonAbstain),
                tensor_filter: TensorFilter::new(&include, &exclude).map_err(py_err)?,
                missing_tensor_policy,
            },
        })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn delta(&self) -> Option<f64> {
        self.inner.delta
    }

    fn __repr__(&self) -> String {
        format!(
            "FusionConfig(mode={:?}, beta={}, delta={:?})",
            self.inner.mode.as_str(),
            self.inner.beta,
            self.inner.delta
        )
    }
}

fn config(cfg: Option<&PyFusionConfig>) -> tf::FusionConfig {
    cfg.map(|c| c.inner.clone()).unwrap_or_default()
}

#[pyfunction]
fn task_vector(base: Vec<f32>, task: Vec<f32>) -> PyResult<Vec<f32>> {
    Ok(tf::task_vector(&base, &task).map_err(py_err)?.into_inner())
}

#[pyfunction]
#[pyo3(signature = (base, taus, config=None))]
fn fuse_tensor(base: Vec<f32>, taus: Vec<Vec<f32>>, config: Option<&PyFusionConfig>) -> PyResult<Vec<f32>> {
    tf::fuse_tensor(&base, &task_vectors(taus), &self::config(config)).map_err(py_err)
}

/// Per element: `(positive_votes, active_task_indices, branch)`.
#[pyfunction]
#[pyo3(signature = (taus, config=None))]
fn consensus_filter(
    taus: Vec<Vec<f32>>,
    config: Option<&PyFusionConfig>,
) -> PyResult<Vec<(u32, Vec<usize>, &'static str)>> {
    let cons = tf::consensus_filter(&task_vectors(taus), &self::config(config)).map_err(py_err)?;
    Ok(cons
        .into_iter()
        .map(|c| {
            let branch = match c.branch {
                Branch::PositiveMajority => "positive_majority",
                Branch::NegativeMajority => "negative_majority",
                Branch::NoConsensus => "no_consensus",
            };
            (c.vote_count, c.active_set.iter().collect(), branch)
        })
        .collect())
}

/// Per element: one weight per task.
#[pyfunction]
#[pyo3(signature = (taus, config=None))]
fn importance_weights(taus: Vec<Vec<f32>>, config: Option<&PyFusionConfig>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = self::config(config);
    let taus = task_vectors(taus);
    let cons = tf::consensus_filter(&taus, &cfg).map_err(py_err)?;
    tf::importance_weights(&taus, &cons, &cfg).map_err(py_err)
}

/// Fuses checkpoint files and returns the consensus report as a dict.
#[pyfunction]
#[pyo3(signature = (base, tasks, out, config=None))]
fn merge<'py>(
    py: Python<'py>,
    base: PathBuf,
    tasks: Vec<PathBuf>,
    out: PathBuf,
    config: Option<&PyFusionConfig>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = self::config(config);
    let outcome = py
        .detach(|| {
            let base = tf::open_checkpoint(&base)?;
            let tasks = tasks
                .iter()
                .map(tf::open_checkpoint)
                .collect::<tf::Result<Vec<_>>>()?;
            tf::merge_checkpoints(&base, &tasks, &cfg, &out)
        })
        .map_err(py_err)?;
    to_py(py, &outcome.report)
}

/// Writes `(name, shape, values, dtype)` tuples; dtype is "F32", "F16" or "BF16".
#[pyfunction]
fn write_checkpoint(path: PathBuf, tensors: Vec<(String, Vec<usize>, Vec<f32>, String)>) -> PyResult<()> {
    let tensors = tensors
        .into_iter()
        .map(|(name, shape, data, dtype)| {
            let dtype = Dtype::from_tag(&dtype)
                .ok_or_else(|| PyValueError::new_err(format!("unsupported dtype {dtype:?}")))?;
            Ok(NamedTensor::new(name, dtype, shape, data))
        })
        .collect::<PyResult<Vec<_>>>()?;
    tf::write_checkpoint(path, &tensors).map_err(py_err)
}

#[pyfunction]
fn compare<'py>(py: Python<'py>, a: PathBuf, b: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let a = tf::open_checkpoint(a).map_err(py_err)?;
    let b = tf::open_checkpoint(b).map_err(py_err)?;
    to_py(py, &analysis::compare_checkpoints(&a, &b).map_err(py_err)?)
}

#[pyfunction]
fn hoeffding_bound(m: u64, p: f64) -> PyResult<f64> {
    sim::hoeffding_bound(m, p).map_err(py_err)
}

#[pyfunction]
fn exact_majority_error(m: u64, p: f64) -> PyResult<f64> {
    sim::exact_majority_error(m, p).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (p, k, trials=100_000, seed=0, magnitudes="lognormal", mu=0.0, sigma=1.0, delta=None, workers=1))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    p: f64,
    k: u32,
    trials: u64,
    seed: u64,
    magnitudes: &str,
    mu: f64,
    sigma: f64,
    delta: Option<f64>,
    workers: u32,
) -> PyResult<Bound<'py, PyAny>> {
    let magnitudes = match magnitudes {
        "unit" => MagnitudeDist::Unit,
        "lognormal" => MagnitudeDist::LogNormal { mu, sigma },
        other => return Err(PyValueError::new_err(format!("unknown magnitude distribution {other:?}"))),
    };
    let cfg = SimConfig {
        delta,
        magnitudes,
        workers,
        ..SimConfig::new(p, k, trials, seed)
    };
    let result = py.detach(|| sim::simulate(&cfg)).map_err(py_err)?;
    to_py(py, &result)
}

/// `rows` are `(method, is_baseline, scores)`; returns z-scores and AvgZ.
#[pyfunction]
fn zscores<'py>(py: Python<'py>, tasks: Vec<String>, rows: Vec<(String, bool, Vec<f64>)>) -> PyResult<Bound<'py, PyAny>> {
    let table = MetricTable {
        tasks,
        rows: rows
            .into_iter()
            .map(|(method, baseline, scores)| MethodScores { method, baseline, scores })
            .collect(),
    };
    to_py(py, &analysis::zscores(&table).map_err(py_err)?)
}

/// `records` are `(id, tools)`; returns train/test ids per subset and the
/// overlap matrix.
#[pyfunction]
#[pyo3(signature = (records, subsets, ratio, seed=0, deterministic_order=false, objective="lexicographic"))]
fn partition<'py>(
    py: Python<'py>,
    records: Vec<(String, Vec<String>)>,
    subsets: usize,
    ratio: f64,
    seed: u64,
    deterministic_order: bool,
    objective: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let objective: AssignObjective = objective.parse().map_err(py_err)?;
    let cfg = PartitionConfig {
        deterministic_order,
        objective,
        ..PartitionConfig::new(subsets, ratio, seed)
    };
    let records = records
        .into_iter()
        .map(|(id, tools)| PartitionRecord::new(id, tools))
        .collect();
    let result = part::partition(records, &cfg).map_err(py_err)?;
    let ids = |rs: &[PartitionRecord]| rs.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
    let splits: Vec<serde_json::Value> = result
        .splits
        .iter()
        .map(|s| serde_json::json!({ "train": ids(&s.train), "test": ids(&s.test) }))
        .collect();
    to_py(py, &serde_json::json!({ "splits": splits, "overlap": result.overlap }))
}

#[pymodule]
fn taskfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyFusionConfig>()?;
    m.add_function(wrap_pyfunction!(task_vector, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(consensus_filter, m)?)?;
    m.add_function(wrap_pyfunction!(importance_weights, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(write_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(hoeffding_bound, m)?)?;
    m.add_function(wrap_pyfunction!(exact_majority_error, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(zscores, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    Ok(())
}

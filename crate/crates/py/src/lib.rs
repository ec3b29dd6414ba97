//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pfcl_core::eval::{self, EvalMatrix};
use pfcl_core::experiment;
use pfcl_core::linalg::{Matrix, Rng};
use pfcl_core::losses;
use pfcl_core::nn::MlpModel;
use pfcl_core::selection;
use pfcl_core::tasks::{self, AuxiliaryPool};
use pfcl_core::trainer::{self, Method};

fn err(e: pfcl_core::Error) -> PyErr {
    match e {
        pfcl_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix needs at least one row"));
    }
    Matrix::from_rows(&rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matrix_rows(m: &EvalMatrix) -> Vec<Option<Vec<f64>>> {
    (0..m.tasks()).map(|i| m.row(i).map(<[f64]>::to_vec)).collect()
}

fn eval_matrix(rows: Vec<Option<Vec<f64>>>) -> PyResult<EvalMatrix> {
    let mut m = EvalMatrix::new(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        if let Some(r) = r {
            m.set_row(i, r).map_err(err)?;
        }
    }
    Ok(m)
}

/// Training hyperparameters. Keyword arguments override the defaults.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (
        method = "pfcl", *, epochs_per_task = None, batch_n = None, lr = None,
        alpha = None, tau = None, k_select = None, kd_stop_last_batches = None,
        er_buffer = None, seed = None, rss = None, hidden = None, lr_drop_epochs = None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        method: &str,
        epochs_per_task: Option<usize>,
        batch_n: Option<usize>,
        lr: Option<f64>,
        alpha: Option<f64>,
        tau: Option<f64>,
        k_select: Option<usize>,
        kd_stop_last_batches: Option<usize>,
        er_buffer: Option<usize>,
        seed: Option<u64>,
        rss: Option<bool>,
        hidden: Option<Vec<usize>>,
        lr_drop_epochs: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let mut c = trainer::TrainConfig {
            method: method.parse::<Method>().map_err(err)?,
            ..Default::default()
        };
        if let Some(v) = epochs_per_task {
            c.epochs_per_task = v;
        }
        if let Some(v) = batch_n {
            c.batch_n = v;
            c.k_select = v;
        }
        if let Some(v) = lr {
            c.lr = v;
        }
        if let Some(v) = alpha {
            c.hp.alpha = v;
        }
        if let Some(v) = tau {
            c.hp.tau = v;
        }
        if let Some(v) = k_select {
            c.k_select = v;
        }
        if let Some(v) = kd_stop_last_batches {
            c.kd_stop_last_batches = v;
        }
        if let Some(v) = er_buffer {
            c.er_buffer = v;
        }
        if let Some(v) = seed {
            c.seed = v;
        }
        if let Some(v) = rss {
            c.rss = v;
        }
        if let Some(v) = hidden {
            c.hidden = v;
        }
        if let Some(v) = lr_drop_epochs {
            c.lr_drop_epochs = v;
        }
        c.validate().map_err(err)?;
        Ok(Self { inner: c })
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.hp.alpha
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.hp.tau
    }

    fn with_method(&self, method: &str) -> PyResult<Self> {
        let m = method.parse::<Method>().map_err(err)?;
        Ok(Self { inner: self.inner.with_method(m) })
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.with_seed(seed) }
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "TaskStream", frozen)]
struct PyTaskStream {
    inner: tasks::TaskStream,
}

#[pymethods]
impl PyTaskStream {
    /// Class-incremental stream over Gaussian classes.
    #[staticmethod]
    #[pyo3(signature = (classes, tasks, dim, separation, per_class, seed = 0))]
    fn gaussian(
        classes: usize,
        tasks: usize,
        dim: usize,
        separation: f64,
        per_class: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = experiment::StreamSpec::Gaussian { classes, tasks, dim, separation, per_class, seed };
        Ok(Self { inner: experiment::build_stream(&spec).map_err(err)? })
    }

    /// Stream and auxiliary pool described by an experiment spec file.
    #[staticmethod]
    fn from_spec(py: Python<'_>, path: &str) -> PyResult<(Self, Option<Py<PyAuxPool>>)> {
        let spec = experiment::parse_spec(path).map_err(err)?;
        let stream = experiment::build_stream(&spec.stream).map_err(err)?;
        let aux = experiment::build_aux(&spec.aux, &stream)
            .map_err(err)?
            .map(|inner| Py::new(py, PyAuxPool { inner }))
            .transpose()?;
        Ok((Self { inner: stream }, aux))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn total_classes(&self) -> usize {
        self.inner.total_classes()
    }

    /// Class set of each task.
    fn task_classes(&self) -> Vec<Vec<usize>> {
        self.inner
            .tasks()
            .iter()
            .map(|t| t.train.labels_present().into_iter().collect())
            .collect()
    }
}

#[pyclass(name = "AuxPool", frozen)]
struct PyAuxPool {
    inner: AuxiliaryPool,
}

#[pymethods]
impl PyAuxPool {
    #[staticmethod]
    #[pyo3(signature = (size, clusters, dim, separation, seed = 0))]
    fn gaussian(size: usize, clusters: usize, dim: usize, separation: f64, seed: u64) -> PyResult<Self> {
        let pool = tasks::make_gaussian_pool(size, clusters, dim, separation, &mut Rng::new(seed))
            .map_err(err)?;
        Ok(Self { inner: pool })
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let pool = AuxiliaryPool::new(to_matrix(rows)?, "python").map_err(err)?;
        Ok(Self { inner: pool })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: MlpModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (dims, seed = 0))]
    fn new(dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: MlpModel::new(&dims, &mut Rng::new(seed)).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: MlpModel::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.logits(&to_matrix(x)?).map_err(err)?))
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

#[pyclass(name = "RunResult", frozen)]
struct PyRunResult {
    out: trainer::RunOutput,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn protocol(&self) -> &'static str {
        self.out.protocol.name()
    }

    /// Accuracy matrix rows; `None` marks a step that was not evaluated.
    #[getter]
    fn matrix(&self) -> Vec<Option<Vec<f64>>> {
        matrix_rows(&self.out.matrix)
    }

    #[getter]
    fn task_il(&self) -> Option<Vec<Option<Vec<f64>>>> {
        self.out.task_il.as_ref().map(matrix_rows)
    }

    #[getter]
    fn avg_accuracy(&self) -> PyResult<f64> {
        eval::avg_accuracy(&self.out.matrix).map_err(err)
    }

    #[getter]
    fn forgetting(&self) -> Option<f64> {
        eval::forgetting(&self.out.matrix).ok()
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel { inner: self.out.model.clone() }
    }

    /// Per-epoch `(task, epoch, mean_loss, lr)` records.
    #[getter]
    fn records(&self) -> Vec<(usize, usize, f64, f64)> {
        self.out
            .records
            .iter()
            .map(|r| (r.task, r.epoch, r.mean_loss, r.lr))
            .collect()
    }
}

/// Trains one method over the stream. The GIL is released while training.
#[pyfunction]
#[pyo3(signature = (stream, config, aux = None))]
fn run_continual(
    py: Python<'_>,
    stream: &PyTaskStream,
    config: &PyTrainConfig,
    aux: Option<&PyAuxPool>,
) -> PyResult<PyRunResult> {
    let aux = aux.map(|a| &a.inner);
    let out = py
        .detach(|| trainer::run_continual(&stream.inner, aux, &config.inner))
        .map_err(err)?;
    Ok(PyRunResult { out })
}

/// Runs a spec file; returns one summary dict per (method, seed).
#[pyfunction]
#[pyo3(signature = (path, overrides = Vec::new(), output = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    path: &str,
    overrides: Vec<String>,
    output: Option<String>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut spec = experiment::parse_spec_with(path, &overrides).map_err(err)?;
    if let Some(o) = output {
        spec.output = o.into();
    }
    let report = py.detach(|| experiment::run_experiment(&spec)).map_err(err)?;
    report
        .summaries
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("method", s.method.to_string())?;
            d.set_item("seed", s.seed)?;
            d.set_item("protocol", &s.protocol)?;
            d.set_item("acc", s.acc)?;
            d.set_item("forget", s.forget)?;
            d.set_item("task_il_acc", s.task_il_acc)?;
            d.set_item("task_il_forget", s.task_il_forget)?;
            d.set_item("wall_time_s", s.wall_time_s)?;
            Ok(d)
        })
        .collect()
}

/// Per-row L1 distance between two logit matrices.
#[pyfunction]
fn l1_discrepancy(z_new: Vec<Vec<f64>>, z_old: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let scores = selection::l1_discrepancy(&to_matrix(z_new)?, &to_matrix(z_old)?).map_err(err)?;
    Ok(scores.into_iter().map(|s| s.score).collect())
}

/// Indices of the `k` rows with the largest discrepancy, ties to the lower index.
#[pyfunction]
fn select_reliable(z_new: Vec<Vec<f64>>, z_old: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    let scores = selection::l1_discrepancy(&to_matrix(z_new)?, &to_matrix(z_old)?).map_err(err)?;
    selection::select_top_k(&scores, k).map_err(err)
}

/// `(value, dlogits)` of mean cross-entropy.
#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let out = losses::cross_entropy(&to_matrix(logits)?, &labels).map_err(err)?;
    Ok((out.value, to_rows(&out.dlogits)))
}

/// `(value, dlogits)` of the temperature-scaled distillation loss.
#[pyfunction]
fn kd_loss(z_new: Vec<Vec<f64>>, z_old: Vec<Vec<f64>>, tau: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let out = losses::kd_loss(&to_matrix(z_new)?, &to_matrix(z_old)?, tau).map_err(err)?;
    Ok((out.value, to_rows(&out.dlogits)))
}

#[pyfunction]
fn avg_accuracy(matrix: Vec<Option<Vec<f64>>>) -> PyResult<f64> {
    eval::avg_accuracy(&eval_matrix(matrix)?).map_err(err)
}

#[pyfunction]
fn forgetting(matrix: Vec<Option<Vec<f64>>>) -> PyResult<f64> {
    eval::forgetting(&eval_matrix(matrix)?).map_err(err)
}

#[pymodule]
fn pfcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTaskStream>()?;
    m.add_class::<PyAuxPool>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_continual, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(l1_discrepancy, m)?)?;
    m.add_function(wrap_pyfunction!(select_reliable, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(avg_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting, m)?)?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    Ok(())
}

//! Python bindings: configs, training, trained models and the standalone
//! metrics.

use std::path::PathBuf;

use mocose::cli::{ExperimentConfig, Preset};
use mocose::negqueue::{NegativeQueue, SliceWindow};
use mocose::tensorgraph::Matrix;
use mocose::tokens::TokenBatch;
use mocose::trainer::{self, Checkpoint, Dataset, TrainReport, TrainState};
use mocose::{augment, ema, metrics, objective, Error};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Input(_) | Error::Format(_) | Error::Contract { .. } | Error::Domain { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix needs at least one row"));
    }
    Matrix::from_rows(&rows).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Experiment config: a preset plus overrides.
#[pyclass(name = "Config", module = "mocose")]
pub struct PyConfig {
    pub inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// `"desk"` or `"base"`.
    #[staticmethod]
    pub fn preset(name: &str) -> PyResult<Self> {
        let preset = match name {
            "desk" => Preset::Desk,
            "base" => Preset::Base,
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner: ExperimentConfig::preset(preset) })
    }

    /// Parses a JSON config; fields override the named preset.
    #[staticmethod]
    pub fn from_json(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_json(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    /// Returns a copy with `overrides` (a JSON object) merged in.
    pub fn with_overrides(&self, overrides: &str) -> PyResult<Self> {
        let patch: serde_json::Value =
            serde_json::from_str(overrides).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let mut base = serde_json::to_value(&self.inner).expect("config serializes");
        mocose::cli::config::merge(&mut base, patch);
        ExperimentConfig::from_value(base).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    pub fn seed(&self) -> u64 {
        self.inner.train.master_seed
    }

    #[setter]
    pub fn set_seed(&mut self, seed: u64) {
        self.inner.train.master_seed = seed;
    }

    #[getter]
    pub fn steps(&self) -> usize {
        self.inner.train.steps
    }

    #[getter]
    pub fn batch_size(&self) -> usize {
        self.inner.train.batch_size
    }

    #[getter]
    pub fn model_dim(&self) -> usize {
        self.inner.train.encoder.model_dim
    }

    /// Maximum traceable distance of the configured run.
    pub fn mtd(&self) -> PyResult<f64> {
        self.inner.train.mtd().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Config(preset={:?}, steps={}, seed={})", self.inner.preset, self.inner.train.steps, self.seed())
    }
}

/// Training sentences and evaluation pairs.
#[pyclass(name = "Dataset", module = "mocose")]
pub struct PyDataset {
    pub inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds the data described by a config. Relative paths resolve
    /// against `base_dir` (default: the working directory).
    #[staticmethod]
    #[pyo3(signature = (config, base_dir = None))]
    pub fn from_config(config: PyRef<'_, PyConfig>, base_dir: Option<PathBuf>) -> PyResult<Self> {
        let base = base_dir.unwrap_or_else(|| PathBuf::from("."));
        config.inner.data.load(&config.inner.train, &base).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    pub fn num_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    pub fn num_eval_pairs(&self) -> usize {
        self.inner.eval_pairs.len()
    }

    /// Token ids of training sentence `i`.
    pub fn sentence(&self, i: usize) -> PyResult<Vec<u32>> {
        self.inner.train.get(i).cloned().ok_or_else(|| PyValueError::new_err(format!("no sentence {i}")))
    }

    /// Gold scores of the evaluation pairs.
    pub fn gold(&self) -> Vec<f64> {
        self.inner.eval_pairs.iter().map(|p| p.gold).collect()
    }
}

/// Summary of a finished training run.
#[pyclass(name = "Report", module = "mocose")]
pub struct PyReport {
    pub inner: TrainReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    pub fn best_eval(&self) -> f64 {
        self.inner.best_eval
    }

    #[getter]
    pub fn collapsed(&self) -> bool {
        self.inner.collapsed
    }

    #[getter]
    pub fn collapse_step(&self) -> Option<usize> {
        self.inner.collapse_step
    }

    #[getter]
    pub fn steps_run(&self) -> usize {
        self.inner.steps_run
    }

    #[getter]
    pub fn mtd(&self) -> f64 {
        self.inner.mtd
    }

    /// Evaluation rows as dicts keyed by metrics CSV column.
    pub fn rows<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("loss", r.loss)?;
                d.set_item("eta", r.eta)?;
                d.set_item("mtd", r.mtd)?;
                d.set_item("alignment", r.alignment)?;
                d.set_item("uniformity", r.uniformity)?;
                d.set_item("eval_spearman", r.eval_spearman)?;
                d.set_item("collapse_score", r.collapse_score)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(steps_run={}, best_eval={:.4}, collapsed={})",
            self.inner.steps_run, self.inner.best_eval, self.inner.collapsed
        )
    }
}

/// Trained (or freshly initialized) online and target branches.
#[pyclass(name = "Model", module = "mocose")]
pub struct PyModel {
    pub state: TrainState,
}

#[pymethods]
impl PyModel {
    /// An untrained model for `config`.
    #[new]
    pub fn new(config: PyRef<'_, PyConfig>) -> PyResult<Self> {
        TrainState::new(&config.inner.train).map(|state| Self { state }).map_err(to_py)
    }

    #[getter]
    pub fn step(&self) -> usize {
        self.state.step
    }

    #[getter]
    pub fn num_parameters(&self) -> usize {
        self.state.online.num_values()
    }

    /// Sentence embeddings of the online encoder, dropout off.
    pub fn embed(&self, sentences: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let tokens = TokenBatch::from_sentences(&sentences);
        self.state.online.embed_sentences(&tokens).map(|m| m.to_rows()).map_err(to_py)
    }

    /// Spearman correlation with gold on the dataset's evaluation pairs.
    pub fn evaluate(&self, data: PyRef<'_, PyDataset>) -> PyResult<f64> {
        trainer::evaluate(&self.state.online, &data.inner.eval_pairs).map_err(to_py)
    }

    /// Runs one training step on a batch of token-id sentences and returns
    /// its loss.
    pub fn train_step(&mut self, sentences: Vec<Vec<u32>>) -> PyResult<f64> {
        let tokens = TokenBatch::from_sentences(&sentences);
        trainer::train_step(&mut self.state, &tokens).map(|row| row.loss).map_err(to_py)
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.checkpoint().save(&path).map_err(to_py)
    }

    /// Replaces both branches with those of a checkpoint of the same shape.
    pub fn load_weights(&mut self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        if ckpt.config != *self.state.online.config() || ckpt.online.has_predictor() != self.state.online.has_predictor() {
            return Err(PyValueError::new_err("checkpoint does not match this model's encoder config"));
        }
        self.state.online = ckpt.online;
        self.state.target = ckpt.target;
        Ok(())
    }
}

/// Trains from scratch; returns the report and the final model.
#[pyfunction]
pub fn train(
    py: Python<'_>,
    config: PyRef<'_, PyConfig>,
    data: PyRef<'_, PyDataset>,
) -> PyResult<(PyReport, PyModel)> {
    let (cfg, set) = (config.inner.train.clone(), data.inner.clone());
    let (report, state) = py.detach(move || trainer::train(&cfg, &set)).map_err(to_py)?;
    Ok((PyReport { inner: report }, PyModel { state }))
}

/// FIFO queue of negative keys.
#[pyclass(name = "NegativeQueue", module = "mocose")]
pub struct PyNegativeQueue {
    pub inner: NegativeQueue,
}

#[pymethods]
impl PyNegativeQueue {
    #[new]
    #[pyo3(signature = (capacity, init_count, dim, seed = 0))]
    pub fn new(capacity: usize, init_count: usize, dim: usize, seed: u64) -> PyResult<Self> {
        NegativeQueue::new(capacity, init_count, dim, seed).map(|inner| Self { inner }).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Appends unit-norm keys, evicting the oldest beyond capacity.
    pub fn push(&mut self, keys: Vec<Vec<f64>>) -> PyResult<()> {
        self.inner.push_batch(&matrix(keys)?).map_err(to_py)
    }

    /// Keys oldest first; `window` is `"a-b"`, `"!a-b"` or `"all"`.
    #[pyo3(signature = (window = None))]
    pub fn negatives(&self, window: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
        let window = match window {
            None | Some("all") => None,
            Some(w) => Some(w.parse::<SliceWindow>().map_err(to_py)?),
        };
        self.inner.negatives(window.as_ref()).map(|m| m.to_rows()).map_err(to_py)
    }
}

#[pyfunction]
pub fn mtd(eta: f64, queue_size: usize, batch_size: usize) -> PyResult<f64> {
    metrics::mtd(eta, queue_size, batch_size).map_err(to_py)
}

#[pyfunction]
pub fn traceable_partial_sum(eta: f64, k: usize) -> PyResult<f64> {
    ema::traceable_partial_sum(eta, k).map_err(to_py)
}

#[pyfunction]
pub fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&x, &y).map_err(to_py)
}

#[pyfunction]
pub fn alignment(u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::alignment(&matrix(u)?, &matrix(v)?).map_err(to_py)
}

#[pyfunction]
pub fn uniformity(points: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::uniformity(&matrix(points)?).map_err(to_py)
}

#[pyfunction]
pub fn collapse_score(embeddings: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::collapse_score(&matrix(embeddings)?).map_err(to_py)
}

/// InfoNCE loss value for unit-norm queries, keys and negatives.
#[pyfunction]
pub fn info_nce(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let dim = q.first().map_or(0, Vec::len);
    let negatives = if negatives.is_empty() { Matrix::zeros(0, dim) } else { matrix(negatives)? };
    objective::info_nce_value(&matrix(q)?, &matrix(k)?, &negatives, tau).map_err(to_py)
}

#[pyfunction]
pub fn fgsm_perturb(x: Vec<f64>, grad: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
    augment::fgsm_perturb(&x, &grad, epsilon).map_err(to_py)
}

#[pymodule(name = "mocose")]
pub fn mocose_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyNegativeQueue>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(mtd, m)?)?;
    m.add_function(wrap_pyfunction!(traceable_partial_sum, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(alignment, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity, m)?)?;
    m.add_function(wrap_pyfunction!(collapse_score, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(fgsm_perturb, m)?)?;
    Ok(())
}

//! Python module `doml`.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use doml::baselines;
use doml::experiment::{self, ExperimentConfig};
use doml::master::{self, UpdateRecord};
use doml::math::{self, CompoundInstance, CompoundWeight, HyperParams, Label, SparseGradient};
use doml::synth::{self, RawPoint, TaskParams};
use doml::worker::{self, Ingest};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn label(y: i64) -> PyResult<Label> {
    match y {
        1 => Ok(Label::Positive),
        -1 => Ok(Label::Negative),
        _ => Err(PyValueError::new_err(format!("label must be +1 or -1, got {y}"))),
    }
}

fn instance(task: usize, x: Vec<f64>, y: i64) -> PyResult<CompoundInstance> {
    Ok(CompoundInstance::new(task, x, label(y)?))
}

fn task_params(a: [f64; 5], theta: f64) -> TaskParams {
    TaskParams { a, theta }
}

/// Hyperparameters from an optional JSON object; missing fields take defaults.
fn hyper_params(json: Option<&str>) -> PyResult<HyperParams> {
    let hp: HyperParams = match json {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => HyperParams::default(),
    };
    hp.validate().map_err(value_err)?;
    Ok(hp)
}

fn json_to_py<'py>(py: Python<'py>, s: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (s,))
}

#[pyclass(name = "InteractionMatrix", frozen)]
struct PyInteraction(math::InteractionMatrix);

#[pymethods]
impl PyInteraction {
    #[staticmethod]
    fn forward(k: usize, b: f64) -> PyResult<Self> {
        math::InteractionMatrix::forward(k, b).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn inverse(k: usize, b: f64) -> PyResult<Self> {
        math::InteractionMatrix::inverse(k, b).map(Self).map_err(value_err)
    }

    #[getter]
    fn diag(&self) -> f64 {
        self.0.diag()
    }

    #[getter]
    fn offdiag(&self) -> f64 {
        self.0.offdiag()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self.0.entry(i, j)
    }

    /// Applies `M ⊗ I_d` to a flat vector of length `k * d`.
    fn apply(&self, v: Vec<f64>, d: usize) -> PyResult<Vec<f64>> {
        self.0.apply_dense(&v, d).map_err(value_err)
    }
}

/// `(a, theta)` for each task of a random-walk family.
#[pyfunction]
fn generate_family(k: usize, sigma: f64, seed: u64) -> PyResult<Vec<([f64; 5], f64)>> {
    let f = synth::generate_family(k, sigma, seed).map_err(value_err)?;
    Ok(f.tasks.iter().map(|t| (t.a, t.theta)).collect())
}

/// First `n` instances `(features, label)` of one task's stream.
#[pyfunction]
fn sample_stream(k: usize, sigma: f64, seed: u64, task: usize, n: usize) -> PyResult<Vec<(Vec<f64>, i64)>> {
    let f = synth::generate_family(k, sigma, seed).map_err(value_err)?;
    let s = synth::sample_stream(&f, task, n, seed).map_err(value_err)?;
    Ok(s.into_iter().map(|i| (i.features, i.label.value() as i64)).collect())
}

#[pyfunction]
fn lift_features(x1: f64, x2: f64) -> Vec<f64> {
    synth::lift_features(RawPoint::new(x1, x2)).to_vec()
}

#[pyfunction]
fn boundary_h(x: f64, a: [f64; 5]) -> f64 {
    synth::boundary_h(x, &a)
}

#[pyfunction]
fn label_point(x1: f64, x2: f64, a: [f64; 5], theta: f64) -> i64 {
    synth::label_point(RawPoint::new(x1, x2), &task_params(a, theta)).value() as i64
}

#[pyclass(name = "Oml")]
struct PyOml(baselines::Oml);

#[pymethods]
impl PyOml {
    #[new]
    #[pyo3(signature = (k, d, hp=None))]
    fn new(k: usize, d: usize, hp: Option<&str>) -> PyResult<Self> {
        baselines::Oml::new(k, d, hyper_params(hp)?).map(Self).map_err(value_err)
    }

    fn step(&mut self, seq: u64, task: usize, x: Vec<f64>, y: i64) -> PyResult<()> {
        self.0.step(seq, &instance(task, x, y)?).map_err(value_err)
    }

    #[getter]
    fn weight(&self) -> Vec<f64> {
        self.0.weight().as_slice().to_vec()
    }

    #[getter]
    fn mistakes(&self) -> Vec<u64> {
        self.0.mistakes().to_vec()
    }

    #[getter]
    fn seen(&self) -> Vec<u64> {
        self.0.seen().to_vec()
    }
}

#[pyclass(name = "Ol")]
struct PyOl(baselines::Ol);

#[pymethods]
impl PyOl {
    #[new]
    #[pyo3(signature = (k, d, hp=None))]
    fn new(k: usize, d: usize, hp: Option<&str>) -> PyResult<Self> {
        baselines::Ol::new(k, d, &hyper_params(hp)?).map(Self).map_err(value_err)
    }

    fn step(&mut self, seq: u64, task: usize, x: Vec<f64>, y: i64) -> PyResult<()> {
        self.0.step(seq, &instance(task, x, y)?).map_err(value_err)
    }

    #[getter]
    fn weight(&self) -> Vec<f64> {
        self.0.weight().to_vec()
    }

    #[getter]
    fn mistakes(&self) -> Vec<u64> {
        self.0.mistakes().to_vec()
    }

    #[getter]
    fn seen(&self) -> Vec<u64> {
        self.0.seen().to_vec()
    }
}

/// Buffer-averaged raw gradient as sent to the master.
#[pyclass(name = "Gradient", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGradient(SparseGradient);

#[pymethods]
impl PyGradient {
    #[new]
    fn new(
        k: usize,
        d: usize,
        blocks: BTreeMap<usize, Vec<f64>>,
        samples: usize,
        basis_version: u64,
        worker: usize,
    ) -> PyResult<Self> {
        SparseGradient::new(k, d, blocks, samples, basis_version, worker)
            .map(Self)
            .map_err(value_err)
    }

    #[getter]
    fn worker(&self) -> usize {
        self.0.worker()
    }

    #[getter]
    fn basis_version(&self) -> u64 {
        self.0.basis_version()
    }

    #[getter]
    fn samples(&self) -> usize {
        self.0.samples()
    }

    #[getter]
    fn support(&self) -> Vec<usize> {
        self.0.support()
    }

    #[getter]
    fn blocks(&self) -> BTreeMap<usize, Vec<f64>> {
        self.0.iter().map(|(t, b)| (t, b.to_vec())).collect()
    }

    fn to_dense(&self) -> Vec<f64> {
        self.0.to_dense()
    }
}

#[pyclass(name = "Worker")]
struct PyWorker(worker::Worker);

#[pymethods]
impl PyWorker {
    #[new]
    fn new(id: usize, k: usize, d: usize, buffer: usize) -> PyResult<Self> {
        if buffer == 0 {
            return Err(PyValueError::new_err("buffer must be at least 1"));
        }
        Ok(Self(worker::Worker::new(id, k, d, buffer)))
    }

    /// Predicts, counts and buffers one instance. True once the buffer is full.
    fn ingest(&mut self, seq: u64, task: usize, x: Vec<f64>, y: i64) -> PyResult<bool> {
        let r = self.0.ingest(seq, instance(task, x, y)?).map_err(value_err)?;
        Ok(matches!(r, Ingest::Full))
    }

    /// Adopts the pulled model and returns the gradient of the buffer.
    fn flush(&mut self, model: Vec<f64>, version: u64, k: usize, d: usize) -> PyResult<PyGradient> {
        let w = CompoundWeight::from_flat(k, d, model, version).map_err(value_err)?;
        self.0.flush(w).map(PyGradient).map_err(value_err)
    }

    #[getter]
    fn buffer_len(&self) -> usize {
        self.0.buffer_len()
    }

    #[getter]
    fn mistakes(&self) -> Vec<u64> {
        self.0.mistakes().to_vec()
    }

    #[getter]
    fn seen(&self) -> Vec<u64> {
        self.0.seen().to_vec()
    }
}

fn update_dict<'py>(py: Python<'py>, u: &UpdateRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", u.round)?;
    d.set_item("worker", u.worker)?;
    d.set_item("seq", u.seq)?;
    d.set_item("tau", u.tau)?;
    d.set_item("waited", u.waited)?;
    d.set_item("basis_version", u.basis_version)?;
    d.set_item("stale_version", u.stale_version)?;
    d.set_item("blocks", u.blocks.clone())?;
    d.set_item("norm", u.norm)?;
    d.set_item("outage", u.outage.clone())?;
    Ok(d)
}

#[pyclass(name = "Master")]
struct PyMaster(master::Master);

#[pymethods]
impl PyMaster {
    #[new]
    #[pyo3(signature = (k, d, workers, hp=None))]
    fn new(k: usize, d: usize, workers: usize, hp: Option<&str>) -> PyResult<Self> {
        master::Master::new(k, d, workers, hyper_params(hp)?)
            .map(Self)
            .map_err(value_err)
    }

    fn enqueue(&mut self, seq: u64, g: &PyGradient) -> PyResult<()> {
        self.0.enqueue(seq, g.0.clone()).map_err(value_err)
    }

    /// Applies every queued gradient the outage rule allows.
    fn drain<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let done = self.0.drain().map_err(value_err)?;
        done.iter().map(|u| update_dict(py, u)).collect()
    }

    #[getter]
    fn waiting_for(&self) -> Option<usize> {
        self.0.waiting_for()
    }

    #[getter]
    fn round(&self) -> u64 {
        self.0.round()
    }

    #[getter]
    fn outage(&self) -> Vec<u64> {
        self.0.outage().counters().to_vec()
    }

    #[getter]
    fn weight(&self) -> Vec<f64> {
        self.0.weight().as_slice().to_vec()
    }
}

/// Default experiment configuration as a JSON string.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_json()
}

/// Runs one experiment from a JSON config and returns its summary.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_experiment<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => ExperimentConfig::default(),
    };
    let report = py
        .detach(|| experiment::run_experiment(&cfg))
        .map_err(value_err)?;
    let s = serde_json::to_string(&report.summary).map_err(value_err)?;
    json_to_py(py, &s)
}

#[pymodule(name = "doml")]
fn doml_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInteraction>()?;
    m.add_class::<PyOml>()?;
    m.add_class::<PyOl>()?;
    m.add_class::<PyGradient>()?;
    m.add_class::<PyWorker>()?;
    m.add_class::<PyMaster>()?;
    m.add_function(wrap_pyfunction!(generate_family, m)?)?;
    m.add_function(wrap_pyfunction!(sample_stream, m)?)?;
    m.add_function(wrap_pyfunction!(lift_features, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_h, m)?)?;
    m.add_function(wrap_pyfunction!(label_point, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

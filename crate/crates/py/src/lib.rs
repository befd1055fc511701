//! Python bindings for the streaming memory model.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use streammem::config::RunConfig;
use streammem::eval::evaluate;
use streammem::lm::Decoding;
use streammem::model::{SelectionStrategy, StreamModel};
use streammem::streaming::{MemoryBank, VideoStream};
use streammem::synth::{gen_dataset, read_dataset, read_stream, write_dataset, write_stream, VideoSample};
use streammem::tokenizer::{detokenize, tokenize};
use streammem::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Data(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn strategy(name: &str) -> PyResult<SelectionStrategy> {
    match name {
        "learned" => Ok(SelectionStrategy::Learned),
        "last-v" | "last_v" => Ok(SelectionStrategy::LastV),
        other => Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
    }
}

/// Run configuration, optionally read from TOML with `a.b=value` overrides.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::load_with_overrides(path.as_deref(), &overrides).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::from_toml(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: self.inner.with_overrides(&overrides).map_err(to_py)?,
        })
    }
}

/// A video stream of per-frame visual tokens.
#[pyclass(name = "Stream")]
struct PyStream {
    inner: VideoStream,
}

#[pymethods]
impl PyStream {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyStream {
            inner: read_stream(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_stream(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    #[getter]
    fn duration_secs(&self) -> f64 {
        self.inner.duration_secs()
    }
}

/// Persisted memories of one encoded stream.
#[pyclass(name = "MemoryBank")]
struct PyBank {
    inner: MemoryBank,
}

#[pymethods]
impl PyBank {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBank {
            inner: MemoryBank::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn equals(&self, other: &PyBank) -> bool {
        self.inner.bit_eq(&other.inner)
    }
}

/// A generated question-answer stream.
#[pyclass(name = "Sample")]
struct PySample {
    inner: VideoSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn num_clips(&self) -> usize {
        self.inner.num_clips
    }

    fn stream(&self) -> PyStream {
        PyStream {
            inner: self.inner.stream.clone(),
        }
    }

    /// `(kind, question, answer, grounding)` tuples.
    fn questions(&self) -> PyResult<Vec<(String, String, String, Vec<usize>)>> {
        self.inner
            .qa
            .iter()
            .map(|q| {
                Ok((
                    q.kind.label().to_string(),
                    detokenize(&q.question).map_err(to_py)?,
                    detokenize(&q.answer).map_err(to_py)?,
                    q.grounding.clone(),
                ))
            })
            .collect()
    }
}

#[pyfunction]
#[pyo3(signature = (config, questions, seed=None))]
fn generate(config: &PyConfig, questions: usize, seed: Option<u64>) -> PyResult<Vec<PySample>> {
    let videos = gen_dataset(&config.inner.synth, questions, seed.unwrap_or(config.inner.seeds.data)).map_err(to_py)?;
    Ok(videos.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyfunction]
fn save_dataset(dir: PathBuf, name: &str, samples: Vec<PyRef<PySample>>) -> PyResult<PathBuf> {
    let videos: Vec<VideoSample> = samples.iter().map(|s| s.inner.clone()).collect();
    write_dataset(&dir, name, &videos).map_err(to_py)
}

#[pyfunction]
fn load_dataset(index: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(read_dataset(&index).map_err(to_py)?.into_iter().map(|inner| PySample { inner }).collect())
}

/// Streaming encoder plus memory reader.
#[pyclass(name = "Model")]
struct PyModel {
    inner: StreamModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyModel {
            inner: StreamModel::new(config.inner.model.clone(), config.inner.seeds.init).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(config: &PyConfig, path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: StreamModel::load(config.inner.model.clone(), &path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn encode(&self, py: Python<'_>, stream: &PyStream) -> PyResult<PyBank> {
        let inner = py.detach(|| self.inner.encode(&stream.inner)).map_err(to_py)?;
        Ok(PyBank { inner })
    }

    /// Returns `(answer, selected)` with 1-based clip indices.
    #[pyo3(signature = (bank, question, strategy="learned"))]
    fn ask(&self, py: Python<'_>, bank: &PyBank, question: &str, strategy: &str) -> PyResult<(String, Vec<usize>)> {
        let strategy = self::strategy(strategy)?;
        let tokens = tokenize(question).map_err(to_py)?;
        let ans = py
            .detach(|| self.inner.answer(&bank.inner, &tokens, &Decoding::Greedy, strategy))
            .map_err(to_py)?;
        let selected = ans.selection.indices().iter().map(|&i| bank.inner.entries[i].index).collect();
        Ok((detokenize(&ans.tokens).map_err(to_py)?, selected))
    }

    /// Per-kind `{hit_rate, mean_iop, iop_at_half, answer_accuracy, joint_accuracy}`.
    #[pyo3(signature = (samples, strategy="learned"))]
    fn evaluate(&self, py: Python<'_>, samples: Vec<PyRef<PySample>>, strategy: &str) -> PyResult<String> {
        let videos: Vec<VideoSample> = samples.iter().map(|s| s.inner.clone()).collect();
        let opts = streammem::eval::EvalOptions {
            strategy: self::strategy(strategy)?,
            ..Default::default()
        };
        let (_, summary) = py.detach(|| evaluate(&self.inner, &videos, &opts)).map_err(to_py)?;
        serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pymodule]
fn streammem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyStream>()?;
    m.add_class::<PyBank>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    Ok(())
}

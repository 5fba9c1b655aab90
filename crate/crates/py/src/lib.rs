//! Python bindings: text normalization, F1 scoring, `MEMB` image-embedding
//! files, training, checkpoint loading and inference.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use memotion::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use memotion::config::FlatConfig;
use memotion::dataset::{Task, TaskHead};
use memotion::embeddings::{
    read_image_embeddings_with_dim, write_image_embeddings, EmbeddingError, ImageEmbedding,
};
use memotion::metrics::{accuracy, confusion, macro_f1, micro_f1, MetricsError};
use memotion::models::{Architecture, Model};
use memotion::pipeline::{evaluate_files, run_train, PipelineError, RunPaths, TrainRequest};
use memotion::synth::{synthetic_corpus, SyntheticConfig};
use memotion::textnorm::{self, ContractionDict, Normalizer};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::MissingInput { .. } | PipelineError::MissingModality(_) => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        PipelineError::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn checkpoint_err(e: CheckpointError) -> PyErr {
    match e {
        CheckpointError::Io { .. } => PyFileNotFoundError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn dictionary(path: Option<PathBuf>) -> PyResult<ContractionDict> {
    match path {
        Some(p) => ContractionDict::load(p).map_err(value_err),
        None => Ok(ContractionDict::builtin()),
    }
}

/// Full normalization pipeline; returns the tokens.
#[pyfunction]
#[pyo3(signature = (text, dict=None, vocab=None))]
fn normalize(
    text: &str,
    dict: Option<PathBuf>,
    vocab: Option<Vec<String>>,
) -> PyResult<Vec<String>> {
    let vocab: Option<HashSet<String>> = vocab.map(|v| v.into_iter().collect());
    Ok(textnorm::normalize(text, &dictionary(dict)?, vocab.as_ref()).tokens)
}

#[pyfunction]
fn strip_urls(text: &str) -> String {
    textnorm::strip_urls(text)
}

#[pyfunction]
fn split_hashtag(text: &str) -> String {
    textnorm::split_hashtag(text)
}

#[pyfunction]
#[pyo3(signature = (token, vocab=None))]
fn collapse_elongation(token: &str, vocab: Option<Vec<String>>) -> String {
    let vocab: Option<HashSet<String>> = vocab.map(|v| v.into_iter().collect());
    textnorm::collapse_elongation(token, vocab.as_ref())
}

#[pyfunction]
#[pyo3(signature = (tokens, dict=None))]
fn expand_contractions(tokens: Vec<String>, dict: Option<PathBuf>) -> PyResult<Vec<String>> {
    Ok(textnorm::expand_contractions(&tokens, &dictionary(dict)?))
}

/// Macro F1, micro F1 and accuracy of `pred` against `gold`.
#[pyfunction]
fn scores(
    gold: Vec<usize>,
    pred: Vec<usize>,
    classes: usize,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let cm = confusion(&gold, &pred, classes).map_err(|e: MetricsError| value_err(e))?;
    Ok(BTreeMap::from([
        ("macro_f1", macro_f1(&cm)),
        ("micro_f1", micro_f1(&cm)),
        ("accuracy", accuracy(&cm)),
    ]))
}

/// Reads a `MEMB` file into `{meme_id: vector}`.
#[pyfunction]
#[pyo3(signature = (path, dim=None))]
fn read_memb(path: PathBuf, dim: Option<usize>) -> PyResult<BTreeMap<String, Vec<f32>>> {
    let entries = read_image_embeddings_with_dim(&path, dim).map_err(|e| match e {
        EmbeddingError::UnreadableFile { .. } => PyFileNotFoundError::new_err(e.to_string()),
        e => value_err(e),
    })?;
    Ok(entries.into_iter().map(|(k, v)| (k, v.vector)).collect())
}

#[pyfunction]
fn write_memb(path: PathBuf, entries: BTreeMap<String, Vec<f32>>) -> PyResult<()> {
    let entries: Vec<ImageEmbedding> = entries
        .into_iter()
        .map(|(meme_id, vector)| ImageEmbedding { meme_id, vector })
        .collect();
    write_image_embeddings(&entries, path).map_err(value_err)
}

/// Writes a seeded synthetic corpus; returns `(corpus_csv, images_memb)`.
#[pyfunction]
#[pyo3(signature = (out_dir, records=60, image_dim=2048, seed=0))]
fn synth(
    out_dir: PathBuf,
    records: usize,
    image_dim: usize,
    seed: u64,
) -> PyResult<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(&out_dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let cfg = SyntheticConfig {
        records,
        image_dim,
        seed,
        ..SyntheticConfig::default()
    };
    synthetic_corpus(&cfg).write_to(&out_dir).map_err(value_err)
}

/// Trains one head and writes the checkpoint, report and manifest.
/// Returns the training report as a dict.
#[pyfunction]
#[pyo3(signature = (
    corpus, arch, head, out, image_embeddings=None, embeddings=None,
    sentiment_embeddings=None, dict=None, epochs=None, seed=0, config=None,
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    corpus: PathBuf,
    arch: &str,
    head: &str,
    out: PathBuf,
    image_embeddings: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    sentiment_embeddings: Option<PathBuf>,
    dict: Option<PathBuf>,
    epochs: Option<usize>,
    seed: u64,
    config: Option<BTreeMap<String, String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let arch: Architecture = arch.parse().map_err(value_err)?;
    let head: TaskHead = head.parse().map_err(value_err)?;
    let mut req = TrainRequest::new(corpus, arch, head, seed);
    if let Some(flat) = config {
        let mut c = FlatConfig::new();
        for (k, v) in flat {
            c.set(k, v);
        }
        req.apply_config(&c).map_err(pipeline_err)?;
    }
    req.image_embeddings = image_embeddings;
    req.embeddings = embeddings;
    req.sentiment_embeddings = sentiment_embeddings;
    req.dict = dict;
    if let Some(e) = epochs {
        req.train.epochs = e;
    }
    let paths = RunPaths::beside(out);
    let run = py
        .detach(|| run_train(&req, &paths, |_| {}))
        .map_err(pipeline_err)?;
    from_json(py, &run.report.to_json())
}

/// Scores a prediction CSV against a gold corpus for task `"a"`, `"b"` or `"c"`.
#[pyfunction]
#[pyo3(signature = (gold, pred, task, exclude_motivational=false))]
fn evaluate<'py>(
    py: Python<'py>,
    gold: PathBuf,
    pred: PathBuf,
    task: &str,
    exclude_motivational: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let task: Task = task.parse().map_err(value_err)?;
    let ev = evaluate_files(&gold, &pred, task, exclude_motivational).map_err(pipeline_err)?;
    from_json(py, &serde_json::to_string(&ev).expect("serializable"))
}

/// A trained single-head model.
#[pyclass(name = "Model", module = "memotion_py", frozen)]
struct PyModel {
    inner: Model,
    norm: Normalizer,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint. `dict` overrides the built-in contraction dictionary.
    #[staticmethod]
    #[pyo3(signature = (path, dict=None))]
    fn load(path: PathBuf, dict: Option<PathBuf>) -> PyResult<Self> {
        let inner = load_checkpoint(&path).map_err(checkpoint_err)?;
        let known: HashSet<String> = inner.vocab().tokens().iter().cloned().collect();
        let norm = Normalizer::new(dictionary(dict)?, Some(known));
        Ok(PyModel { inner, norm })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(checkpoint_err)
    }

    #[getter]
    fn architecture(&self) -> String {
        self.inner.architecture().to_string()
    }

    #[getter]
    fn head(&self) -> String {
        self.inner.head().to_string()
    }

    #[getter]
    fn classes(&self) -> Vec<&'static str> {
        self.inner.head().class_names()
    }

    #[getter]
    fn uses_image(&self) -> bool {
        self.inner.architecture().uses_image()
    }

    /// Class probabilities for one caption and optional image vector.
    #[pyo3(signature = (text, image=None))]
    fn predict_proba(&self, text: &str, image: Option<Vec<f32>>) -> PyResult<Vec<f64>> {
        let seq = self.inner.encode_text(&self.norm.normalize(text));
        self.inner
            .predict_proba(&seq, image.as_deref())
            .map_err(value_err)
    }

    /// Most probable class name.
    #[pyo3(signature = (text, image=None))]
    fn predict(&self, text: &str, image: Option<Vec<f32>>) -> PyResult<&'static str> {
        let p = self.predict_proba(text, image)?;
        Ok(self.classes()[memotion::models::argmax(&p)])
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(architecture={:?}, head={:?})",
            self.architecture(),
            self.head()
        )
    }
}

#[pymodule]
fn memotion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(strip_urls, m)?)?;
    m.add_function(wrap_pyfunction!(split_hashtag, m)?)?;
    m.add_function(wrap_pyfunction!(collapse_elongation, m)?)?;
    m.add_function(wrap_pyfunction!(expand_contractions, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(read_memb, m)?)?;
    m.add_function(wrap_pyfunction!(write_memb, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

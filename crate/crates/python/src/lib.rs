//! Python bindings: tokenizers, trained encoders, retrieval metrics and the
//! data and training pipeline entry points.

use std::collections::BTreeMap;
use std::path::PathBuf;

use medeir::cli::{run_pipeline, RunConfig};
use medeir::datapipe;
use medeir::eval;
use medeir::model::EncoderModel;
use medeir::tokenizer::{self, TokenizerModel, TrainerConfig, Vocabulary};
use medeir::training::{lr_at, ScheduleConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: medeir::Error) -> PyErr {
    match e {
        medeir::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_user_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// WordPiece tokenizer.
#[pyclass(module = "medeir_py", frozen)]
struct Tokenizer {
    inner: TokenizerModel,
}

#[pymethods]
impl Tokenizer {
    /// Loads a vocabulary file (one token per line).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TokenizerModel::load(&path).map_err(to_py)?,
        })
    }

    /// Trains a vocabulary of at most `size` tokens on `texts`.
    #[staticmethod]
    #[pyo3(signature = (texts, size, min_freq = 2, lowercase = true))]
    fn train(texts: Vec<String>, size: usize, min_freq: u64, lowercase: bool) -> PyResult<Self> {
        let cfg = TrainerConfig {
            lowercase,
            ..TrainerConfig::default()
        };
        let vocab = tokenizer::train_wordpiece_with(&texts, size, min_freq, &cfg).map_err(to_py)?;
        let mut inner = TokenizerModel::new(vocab).map_err(to_py)?;
        inner.lowercase = lowercase;
        Ok(Self { inner })
    }

    /// Base vocabulary followed by the domain tokens it lacks.
    #[staticmethod]
    fn merge(base: PathBuf, domain: PathBuf) -> PyResult<Self> {
        let base = Vocabulary::load(&base).map_err(to_py)?;
        let domain = Vocabulary::load(&domain).map_err(to_py)?;
        let merged = tokenizer::merge_vocabularies(&base, &domain).map_err(to_py)?;
        Ok(Self {
            inner: TokenizerModel::new(merged).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        medeir::io::write_atomic(&path, self.inner.vocab.to_file_string().as_bytes()).map_err(to_py)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text).ids
    }

    fn tokens(&self, text: &str) -> Vec<String> {
        self.inner.tokens(text)
    }

    fn count_tokens(&self, text: &str) -> usize {
        self.inner.count_tokens(text)
    }

    /// Packs documents into `chunk_len`-token id chunks separated by [SEP].
    #[pyo3(signature = (texts, chunk_len = datapipe::DEFAULT_CHUNK_LEN, min_tail = datapipe::DEFAULT_MIN_TAIL))]
    fn pack(&self, texts: Vec<String>, chunk_len: usize, min_tail: usize) -> PyResult<Vec<Vec<u32>>> {
        datapipe::pack_chunks(&texts, &self.inner, chunk_len, min_tail).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.vocab.len()
    }

    fn __repr__(&self) -> String {
        format!("Tokenizer(vocab_size={})", self.inner.vocab.len())
    }
}

/// Token counts of two tokenizers on the same texts, as a dict.
#[pyfunction]
#[pyo3(signature = (base, merged, texts, corpus_id = "corpus"))]
fn compare_tokenizers<'py>(
    py: Python<'py>,
    base: &Tokenizer,
    merged: &Tokenizer,
    texts: Vec<String>,
    corpus_id: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let report = tokenizer::tokenizer_compare(&base.inner, &merged.inner, &texts, corpus_id).map_err(to_py)?;
    json_to_py(py, &report)
}

/// A trained encoder checkpoint.
#[pyclass(module = "medeir_py", frozen)]
struct Encoder {
    model: EncoderModel,
    tokenizer: TokenizerModel,
}

#[pymethods]
impl Encoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, tokenizer) = EncoderModel::load(&path).map_err(to_py)?;
        Ok(Self { model, tokenizer })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.config().hidden
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }

    #[getter]
    fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            inner: self.tokenizer.clone(),
        }
    }

    /// Unit-length sentence embedding.
    fn embed(&self, text: &str) -> PyResult<Vec<f64>> {
        self.model.embed_text(&self.tokenizer, text).map_err(to_py)
    }

    fn embed_many(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let enc = medeir::model::TextEncoder::new(&self.model, &self.tokenizer);
        eval::embed_texts(&enc, &refs).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let c = self.model.config();
        format!("Encoder(dim={}, layers={}, heads={})", c.hidden, c.layers, c.heads)
    }
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::cosine(&a, &b).map_err(to_py)
}

/// nDCG@k of a ranked list of document ids against graded relevance.
#[pyfunction]
fn ndcg_at_k(ranked: Vec<String>, qrels: BTreeMap<String, u32>, k: usize) -> f64 {
    eval::ndcg_at_k(&ranked, &qrels, k)
}

/// Share of relevant documents found in the top k, or None without any.
#[pyfunction]
fn recall_at_k(ranked: Vec<String>, qrels: BTreeMap<String, u32>, k: usize) -> Option<f64> {
    eval::recall_at_k(&ranked, &qrels, k)
}

#[pyfunction]
fn clean_document(text: &str) -> String {
    datapipe::clean_document(text)
}

/// Learning rate at 1-based `step` of a linear warmup and decay schedule.
#[pyfunction]
fn learning_rate(total_steps: usize, warmup_fraction: f64, peak: f64, step: usize) -> PyResult<f64> {
    let schedule = ScheduleConfig {
        total_steps,
        warmup_fraction,
    };
    schedule.validate().map_err(to_py)?;
    lr_at(&schedule, peak, step).map_err(to_py)
}

/// Runs a whole pipeline from a JSON run config and returns the report.
#[pyfunction]
fn run(py: Python<'_>, config: PathBuf, out: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let cfg: RunConfig = medeir::io::read_json(&config).map_err(to_py)?;
    let base = config.parent().map(PathBuf::from).unwrap_or_default();
    let report = run_pipeline(&cfg, &base, &out).map_err(to_py)?;
    json_to_py(py, &report)
}

#[pymodule]
fn medeir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tokenizer>()?;
    m.add_class::<Encoder>()?;
    m.add_function(wrap_pyfunction!(compare_tokenizers, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(clean_document, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

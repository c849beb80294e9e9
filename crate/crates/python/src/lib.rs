//! Python bindings: evaluation metrics, configuration, trained checkpoints
//! and the command-line front end.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cyclevqa::cli::{self, Cli};
use cyclevqa::corpus::{AnswerLabelSet, RegionFeatures, SplitName};
use cyclevqa::eval;
use cyclevqa::failure;
use cyclevqa::tensor::Tensor;
use cyclevqa::trainer;
use cyclevqa::vqa::{forward_vqa, predict_answer};
use cyclevqa::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Maps words to ids so the token-level metrics can compare them.
fn intern<'a>(ids: &mut HashMap<&'a str, usize>, words: &'a [String]) -> Vec<usize> {
    words
        .iter()
        .map(|w| {
            let next = ids.len();
            *ids.entry(w.as_str()).or_insert(next)
        })
        .collect()
}

/// CS(k) for one group given per-member correctness.
#[pyfunction]
fn consensus_score(correct: Vec<bool>, k: usize) -> PyResult<f64> {
    eval::consensus_score(&correct, k).map_err(py_err)
}

/// Soft VQA accuracy of `predicted` against the human answers.
#[pyfunction]
fn vqa_accuracy(predicted: &str, answers: Vec<String>) -> PyResult<f64> {
    let labels = AnswerLabelSet::new(&answers).map_err(py_err)?;
    Ok(eval::vqa_accuracy(predicted, &labels))
}

/// Sentence BLEU over word lists.
#[pyfunction]
#[pyo3(signature = (hypothesis, references, max_n = 4))]
fn bleu(hypothesis: Vec<String>, references: Vec<Vec<String>>, max_n: usize) -> PyResult<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(PyValueError::new_err("max_n must be in 1..=4"));
    }
    if hypothesis.is_empty() || references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(PyValueError::new_err("hypothesis and references must be non-empty"));
    }
    let mut ids = HashMap::new();
    let hyp = intern(&mut ids, &hypothesis);
    let refs: Vec<Vec<usize>> = references.iter().map(|r| intern(&mut ids, r)).collect();
    let refs: Vec<&[usize]> = refs.iter().map(Vec::as_slice).collect();
    Ok(eval::bleu_tokens(&hyp, &refs, max_n))
}

/// ROUGE-L F-measure over word lists.
#[pyfunction]
fn rouge_l(hypothesis: Vec<String>, reference: Vec<String>) -> f64 {
    let mut ids = HashMap::new();
    let hyp = intern(&mut ids, &hypothesis);
    let reference = intern(&mut ids, &reference);
    eval::rouge_l_tokens(&hyp, &reference)
}

#[pyfunction]
fn precision_recall_f1(predicted: Vec<bool>, truth: Vec<bool>) -> PyResult<(f64, f64, f64)> {
    failure::precision_recall_f1(&predicted, &truth).map_err(py_err)
}

/// Runs a `cyclevqa` subcommand, e.g. `run_cli(["synth", "--out", "data"])`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<()> {
    let argv = std::iter::once("cyclevqa".to_string()).chain(args);
    let parsed = Cli::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cli::run(parsed).map_err(py_err)
}

/// Training configuration, serialized as flat `key = value` text.
#[pyclass(name = "CycleConfig")]
#[derive(Clone)]
struct PyCycleConfig {
    inner: trainer::CycleConfig,
}

#[pymethods]
impl PyCycleConfig {
    /// Defaults, or the given config text.
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => trainer::CycleConfig::parse(t).map_err(py_err)?,
            None => trainer::CycleConfig::default(),
        };
        Ok(PyCycleConfig { inner })
    }

    /// Q-consistency, A-consistency and gating enabled.
    #[staticmethod]
    fn full_cycle() -> Self {
        PyCycleConfig { inner: trainer::CycleConfig::full_cycle() }
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn lambda_g(&self) -> f64 {
        self.inner.lambda_g
    }
    #[setter]
    fn set_lambda_g(&mut self, v: f64) {
        self.inner.lambda_g = v;
    }
    #[getter]
    fn lambda_c(&self) -> f64 {
        self.inner.lambda_c
    }
    #[setter]
    fn set_lambda_c(&mut self, v: f64) {
        self.inner.lambda_c = v;
    }
    #[getter]
    fn t_sim(&self) -> f64 {
        self.inner.t_sim
    }
    #[setter]
    fn set_t_sim(&mut self, v: f64) {
        self.inner.t_sim = v;
    }
    #[getter]
    fn a_iter(&self) -> u64 {
        self.inner.a_iter
    }
    #[setter]
    fn set_a_iter(&mut self, v: u64) {
        self.inner.a_iter = v;
    }
    #[getter]
    fn enable_q_consistency(&self) -> bool {
        self.inner.enable_q_consistency
    }
    #[setter]
    fn set_enable_q_consistency(&mut self, v: bool) {
        self.inner.enable_q_consistency = v;
    }
    #[getter]
    fn enable_a_consistency(&self) -> bool {
        self.inner.enable_a_consistency
    }
    #[setter]
    fn set_enable_a_consistency(&mut self, v: bool) {
        self.inner.enable_a_consistency = v;
    }
    #[getter]
    fn enable_gating(&self) -> bool {
        self.inner.enable_gating
    }
    #[setter]
    fn set_enable_gating(&mut self, v: bool) {
        self.inner.enable_gating = v;
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "CycleConfig(lambda_G={}, lambda_C={}, T_sim={}, A_iter={}, q={}, a={}, gating={})",
            self.inner.lambda_g,
            self.inner.lambda_c,
            self.inner.t_sim,
            self.inner.a_iter,
            self.inner.enable_q_consistency,
            self.inner.enable_a_consistency,
            self.inner.enable_gating
        )
    }
}

/// A trained checkpoint: vocabularies, configuration and parameters.
#[pyclass(name = "Model")]
struct PyModel {
    ck: trainer::Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { ck: trainer::Checkpoint::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.ck.state.iteration
    }

    #[getter]
    fn answers(&self) -> Vec<String> {
        self.ck.answers.answers().to_vec()
    }

    fn config(&self) -> PyCycleConfig {
        PyCycleConfig { inner: self.ck.config.clone() }
    }

    /// Answer and confidence for a question over region features
    /// (one row per region).
    fn answer(&self, question: &str, regions: Vec<Vec<f64>>) -> PyResult<(String, f64)> {
        let rows = regions.len();
        let cols = regions.first().map_or(0, Vec::len);
        if rows == 0 || regions.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("regions must be a non-empty rectangular list"));
        }
        let image = RegionFeatures::new(0, Tensor::from_vec(rows, cols, regions.concat())).map_err(py_err)?;
        let out = forward_vqa(&self.ck.state.vqa, &self.ck.vocab.encode(question), &image).map_err(py_err)?;
        let idx = predict_answer(&out);
        let answer = self.ck.answers.answer(idx).unwrap_or_default().to_string();
        Ok((answer, out.answer_distribution.probs()[idx]))
    }

    /// `(question_id, answer, confidence)` for every question in a data directory.
    fn predict(&self, data_dir: PathBuf) -> PyResult<Vec<(u64, String, f64)>> {
        let files = cli::read_data_files(&data_dir).map_err(py_err)?;
        let data = cli::load_data(&data_dir, &files, &self.ck.vocab, SplitName::Val).map_err(py_err)?;
        let preds = eval::predict_split(&self.ck.state.vqa, &data.split, &data.features, &self.ck.answers).map_err(py_err)?;
        Ok(preds.into_iter().map(|p| (p.question_id, p.predicted_answer, p.confidence)).collect())
    }

    /// Consensus report for a data directory with rephrasing groups, as JSON text.
    fn evaluate(&self, data_dir: PathBuf) -> PyResult<String> {
        let files = cli::read_data_files(&data_dir).map_err(py_err)?;
        let data = cli::load_data(&data_dir, &files, &self.ck.vocab, SplitName::Val).map_err(py_err)?;
        if data.split.groups.is_empty() {
            return Err(PyValueError::new_err("data directory has no rephrasing groups"));
        }
        let preds = eval::predict_split(&self.ck.state.vqa, &data.split, &data.features, &self.ck.answers).map_err(py_err)?;
        let report = eval::evaluate_consensus(&preds, &data.split).map_err(py_err)?;
        Ok(report.to_json())
    }
}

#[pymodule]
fn cyclevqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(consensus_score, m)?)?;
    m.add_function(wrap_pyfunction!(vqa_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall_f1, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyCycleConfig>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}

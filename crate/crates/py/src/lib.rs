//! Python bindings: models, calibration, criteria and one-shot pruning.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use moelab::calibration::{run_calibration, CalibrationOptions, CalibrationStats};
use moelab::checkpoint::{load_model, model_digest, save_model, Storage};
use moelab::corpus::{build_calibration_set, synthetic_text};
use moelab::criteria::{score_layer, select_drop as core_select_drop, Criterion, CriterionId, Direction, ScoreOptions};
use moelab::eval::{evaluate, EvalSplit};
use moelab::finetune::{pretrain, TrainSpec};
use moelab::linalg::{stable_rank as core_stable_rank, Matrix};
use moelab::model::{self as m, ModelConfig, MoEModel, Router};
use moelab::pruning::{one_shot as core_one_shot, PruneContext};
use moelab::{Error, ErrorClass};

fn py_err(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Validation => PyValueError::new_err(e.to_string()),
        ErrorClass::Numerical => PyArithmeticError::new_err(e.to_string()),
        ErrorClass::Io => PyIOError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Matrix::from_vec(r, c, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn direction(d: Option<&str>, c: Criterion) -> PyResult<Direction> {
    d.map_or(Ok(c.default_direction()), |s| s.parse().map_err(py_err))
}

#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: moelab::corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[new]
    fn new(data: Vec<u8>) -> Self {
        PyCorpus { inner: moelab::corpus::Corpus::from_bytes(data) }
    }

    #[staticmethod]
    #[pyo3(signature = (n_bytes, seed = 7))]
    fn synthetic(n_bytes: usize, seed: u64) -> Self {
        PyCorpus::new(synthetic_text(n_bytes, seed))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus { inner: moelab::corpus::Corpus::load(&path).map_err(py_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn digest(&self) -> String {
        self.inner.digest().to_string()
    }
}

#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: MoEModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (d_model = 64, n_layers = 4, n_experts = 8, top_k = 2, d_hidden = 128, seq_len = 256, seed = 0, renormalize_topk = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(d_model: usize, n_layers: usize, n_experts: usize, top_k: usize, d_hidden: usize, seq_len: usize, seed: u64, renormalize_topk: bool) -> PyResult<Self> {
        let config = ModelConfig { d_model, n_layers, n_experts, top_k, d_hidden, seq_len, seed, renormalize_topk, ..Default::default() };
        Ok(PyModel { inner: MoEModel::init(config).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: load_model(&path).map_err(py_err)? })
    }

    #[pyo3(signature = (path, storage = "f32"))]
    fn save(&self, path: PathBuf, storage: &str) -> PyResult<String> {
        let storage = match storage {
            "f32" => Storage::F32,
            "f64" => Storage::F64,
            other => return Err(PyValueError::new_err(format!("unknown storage `{other}`"))),
        };
        save_model(&self.inner, &path, storage).map_err(py_err)
    }

    fn digest(&self) -> String {
        model_digest(&self.inner)
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    fn identity_map(&self) -> Vec<Vec<usize>> {
        self.inner.identity_map()
    }

    /// Logits for every position, `len(tokens) × vocab`.
    fn forward(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let pass = self.inner.forward(&tokens).map_err(py_err)?;
        Ok((0..pass.logits.rows).map(|r| pass.logits.row(r).to_vec()).collect())
    }

    /// Mean next-token cross-entropy over `window[1..]`.
    fn loss(&self, window: Vec<u32>) -> PyResult<f64> {
        if window.len() < 2 {
            return Err(PyValueError::new_err("window needs at least two tokens"));
        }
        let pass = self.inner.forward(&window[..window.len() - 1]).map_err(py_err)?;
        m::loss(&pass.logits, &window[1..]).map_err(py_err)
    }

    #[pyo3(signature = (corpus, tokens, seed = 0))]
    fn pretrain(&mut self, corpus: &PyCorpus, tokens: u64, seed: u64) -> PyResult<Vec<f64>> {
        let spec = TrainSpec { tokens, seed, ..Default::default() };
        let curve = pretrain(&mut self.inner, &corpus.inner, &spec).map_err(py_err)?;
        Ok(curve.iter().map(|p| p.loss).collect())
    }

    #[pyo3(signature = (corpus, max_windows = None))]
    fn perplexity(&self, corpus: &PyCorpus, max_windows: Option<usize>) -> PyResult<f64> {
        let split = EvalSplit::from_corpus(&corpus.inner, self.inner.config.seq_len, max_windows).map_err(py_err)?;
        Ok(evaluate(&self.inner, &split, None).map_err(py_err)?.perplexity)
    }
}

#[pyclass(name = "CalibrationStats")]
struct PyStats {
    inner: CalibrationStats,
}

#[pymethods]
impl PyStats {
    fn usage(&self, layer: usize) -> PyResult<Vec<u64>> {
        Ok(self.inner.layer(layer).map_err(py_err)?.usage.clone())
    }

    fn collaboration(&self, layer: usize) -> PyResult<Vec<Vec<u64>>> {
        let c = &self.inner.layer(layer).map_err(py_err)?.collaboration;
        Ok((0..c.n).map(|i| (0..c.n).map(|j| c.get(i, j)).collect()).collect())
    }

    #[getter]
    fn token_total(&self) -> u64 {
        self.inner.token_total
    }
}

#[pyfunction]
#[pyo3(signature = (model, corpus, sequences = 64, seed = 0, gradients = true))]
fn calibrate(model: &PyModel, corpus: &PyCorpus, sequences: usize, seed: u64, gradients: bool) -> PyResult<PyStats> {
    let cs = build_calibration_set(&corpus.inner, sequences, model.inner.config.seq_len, seed).map_err(py_err)?;
    let opts = CalibrationOptions { collect_gradients: gradients, ..Default::default() };
    Ok(PyStats { inner: run_calibration(&model.inner, &cs, &opts).map_err(py_err)? })
}

/// `(name, family, default direction)` for every criterion.
#[pyfunction]
fn criteria() -> Vec<(String, String, String)> {
    Criterion::ALL.iter().map(|c| (c.name().to_string(), format!("{:?}", c.family()).to_lowercase(), c.default_direction().to_string())).collect()
}

/// Per-layer scores over retained experts.
#[pyfunction]
#[pyo3(signature = (model, criterion, stats = None))]
fn score(model: &PyModel, criterion: &str, stats: Option<&PyStats>) -> PyResult<Vec<Vec<f64>>> {
    let c: Criterion = criterion.parse().map_err(py_err)?;
    (0..model.inner.n_layers())
        .map(|l| Ok(score_layer(&model.inner, stats.map(|s| &s.inner), c, l, &ScoreOptions::default()).map_err(py_err)?.scores))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (scores, direction, m, top_k, exclude = Vec::new()))]
fn select_drop(scores: Vec<f64>, direction: &str, m: usize, top_k: usize, exclude: Vec<usize>) -> PyResult<Vec<usize>> {
    let d: Direction = direction.parse().map_err(py_err)?;
    core_select_drop(&scores, d, &exclude.into_iter().collect::<BTreeSet<_>>(), m, top_k).map_err(py_err)
}

/// Routing for one token: `(original expert ids, affinities, probabilities)`.
#[pyfunction]
#[pyo3(signature = (w_gate, x, k, renormalize = false))]
fn gate(w_gate: Vec<Vec<f64>>, x: Vec<f64>, k: usize, renormalize: bool) -> PyResult<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let w = matrix(w_gate)?;
    let router = Router { expert_ids: (0..w.cols).collect(), w_gate: w };
    let g = m::gate(&router, &x, k, renormalize).map_err(py_err)?;
    Ok((g.experts, g.affinities, g.probs))
}

#[pyfunction]
fn stable_rank(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    core_stable_rank(&matrix(rows)?).map_err(py_err)
}

/// Prune a fraction of experts per layer; returns the pruned model and plan JSON.
#[pyfunction]
#[pyo3(signature = (model, criterion, sparsity, corpus = None, direction = None, sequences = 64, seed = 0))]
fn one_shot(model: &PyModel, criterion: &str, sparsity: f64, corpus: Option<&PyCorpus>, direction: Option<&str>, sequences: usize, seed: u64) -> PyResult<(PyModel, String)> {
    let c: Criterion = criterion.parse().map_err(py_err)?;
    let id = CriterionId::new(c, self::direction(direction, c)?);
    let cs = corpus.map(|k| build_calibration_set(&k.inner, sequences, model.inner.config.seq_len, seed)).transpose().map_err(py_err)?;
    let out = core_one_shot(&model.inner, id, sparsity, &PruneContext::new(cs.as_ref())).map_err(py_err)?;
    Ok((PyModel { inner: out.model }, out.plan.to_json()))
}

#[pymodule]
fn moelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyStats>()?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(criteria, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(select_drop, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(stable_rank, m)?)?;
    m.add_function(wrap_pyfunction!(one_shot, m)?)?;
    m.add("__version__", moelab::checkpoint::TOOL_VERSION)?;
    Ok(())
}

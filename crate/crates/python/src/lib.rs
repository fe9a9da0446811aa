//! Python bindings: corpus generation, training, evaluation, decoding and
//! composition-weight inspection.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use compolab::checkpoint::Checkpoint;
use compolab::cli;
use compolab::cogsynth::{self, CorpusRow, Grammar as CoreGrammar, GrammarConfig};
use compolab::composer::{CollectMode, CompositionMode};
use compolab::config::RunConfig;
use compolab::evaluator;
use compolab::trainer::model_from_checkpoint;
use compolab::transformer::{Model as CoreModel, ModelConfig};
use compolab::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn resolve(config: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.apply_file(&path).map_err(to_py)?;
    }
    let mut pairs = Vec::new();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            pairs.push((k.str()?.to_string(), v.str()?.to_string()));
        }
    }
    pairs.sort();
    for (k, v) in pairs {
        cfg.set(&k, &v).map_err(to_py)?;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// The synthetic reordering grammar and its reference translator.
#[pyclass(module = "compolab")]
struct Grammar {
    inner: CoreGrammar,
}

#[pymethods]
impl Grammar {
    #[new]
    #[pyo3(signature = (nouns = 30, verbs = 20, modifiers = 10))]
    fn new(nouns: usize, verbs: usize, modifiers: usize) -> PyResult<Self> {
        let inner = CoreGrammar::new(GrammarConfig { nouns, verbs, modifiers }).map_err(to_py)?;
        Ok(Grammar { inner })
    }

    /// Reference translation of a tokenized source sentence.
    fn translate(&self, source: Vec<String>) -> PyResult<Vec<String>> {
        cogsynth::oracle_translate(&source, &self.inner).map_err(to_py)
    }

    fn source_vocab(&self) -> Vec<String> {
        self.inner.src_vocab.tokens().to_vec()
    }

    fn target_vocab(&self) -> Vec<String> {
        self.inner.tgt_vocab.tokens().to_vec()
    }
}

/// Compound translation error rate over aligned predictions and references.
///
/// `spans[i]` is the `[start, end)` token range of the compound inside
/// `references[i]`. Returns `(instance, aggregate)`.
#[pyfunction]
fn cter(
    predictions: Vec<Vec<String>>,
    references: Vec<Vec<String>>,
    spans: Vec<(usize, usize)>,
    compound_ids: Vec<String>,
) -> PyResult<(f64, f64)> {
    if references.len() != spans.len() || references.len() != compound_ids.len() {
        return Err(PyValueError::new_err("references, spans and compound_ids must have equal length"));
    }
    let rows: Vec<CorpusRow> = references
        .into_iter()
        .zip(spans)
        .zip(compound_ids)
        .map(|((tgt, (a, b)), id)| CorpusRow { src: vec![], tgt, compound_id: Some(id), compound_span: Some([a, b]) })
        .collect();
    let c = evaluator::cter(&predictions, &rows).map_err(to_py)?;
    Ok((c.instance, c.aggregate))
}

/// Writes the four corpus splits, vocabularies and a generation report to `out`.
#[pyfunction]
#[pyo3(signature = (out, config = None, overrides = None))]
fn generate_corpus(out: PathBuf, config: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let cfg = resolve(config, overrides)?;
    cli::gen_data(&cfg, &out).map_err(to_py)
}

/// Trains on `data/train.jsonl`, writing logs and checkpoints under `out`.
#[pyfunction]
#[pyo3(signature = (data, out, config = None, overrides = None, resume = None))]
fn train(
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    overrides: Option<&Bound<'_, PyDict>>,
    resume: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = resolve(config, overrides)?;
    cli::train_cmd(&cfg, &data, &out, resume.as_deref()).map_err(to_py)
}

/// Decodes cg-test (and test, when present) and returns the report fields.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, report_dir, config = None, overrides = None))]
fn evaluate(
    checkpoint: PathBuf,
    data: PathBuf,
    report_dir: PathBuf,
    config: Option<PathBuf>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<HashMap<String, f64>> {
    let cfg = resolve(config, overrides)?;
    let json = cli::eval_cmd(&cfg, Some(&checkpoint), &data, &report_dir, None).map_err(to_py)?;
    let r: evaluator::EvalReport = serde_json::from_str(&json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut out = HashMap::from([
        ("cter_instance".to_string(), r.cter_instance),
        ("cter_aggregate".to_string(), r.cter_aggregate),
        ("exact_match".to_string(), r.exact_match),
        ("truncated".to_string(), r.truncated as f64),
    ]);
    if let Some(t) = r.test_exact_match {
        out.insert("test_exact_match".into(), t);
    }
    Ok(out)
}

/// Finite-difference gradient check on the tiny model. Returns
/// `(max_rel_error, composition_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (mode = "per_layer", seed = 1))]
fn gradcheck(mode: &str, seed: u64) -> PyResult<(f64, Option<f64>, bool)> {
    let mut cfg = RunConfig::gradcheck_defaults();
    cfg.model.composition = mode.parse().map_err(to_py)?;
    let o = cli::gradcheck_cmd(&cfg, seed, None).map_err(to_py)?;
    Ok((o.max_rel_error, o.composition_rel_error, o.passed()))
}

type WeightExport = (Vec<String>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// A sequence-to-sequence model, freshly initialized or loaded from a checkpoint.
#[pyclass(module = "compolab")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (
        src_vocab, tgt_vocab, mode = "per_layer", collect = "both", enc_layers = 2, dec_layers = 2,
        d_model = 8, d_ff = 16, heads = 2, max_len = 32, seed = 1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        src_vocab: usize,
        tgt_vocab: usize,
        mode: &str,
        collect: &str,
        enc_layers: usize,
        dec_layers: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            enc_layers,
            dec_layers,
            d_model,
            d_ff,
            heads,
            src_vocab,
            tgt_vocab,
            max_len,
            composition: mode.parse::<CompositionMode>().map_err(to_py)?,
            collect: CollectMode::from_flag(collect).map_err(to_py)?,
            layer_range: None,
            dropout: 0.0,
        };
        Ok(Model { inner: CoreModel::new(config, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(Path::new(&path)).map_err(to_py)?;
        Ok(Model { inner: model_from_checkpoint(&ck).map_err(to_py)? })
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.config().composition.to_string()
    }

    fn parameter_count(&self) -> usize {
        self.inner.params().numel()
    }

    fn composition_scalars(&self) -> usize {
        self.inner.composition_table().map_or(0, |t| t.param_count())
    }

    /// Token-level cross-entropy of `target` given `source` (ids, without BOS/EOS).
    fn loss(&self, source: Vec<usize>, target: Vec<usize>) -> PyResult<f64> {
        self.inner.forward_teacher_forced(&source, &target).map_err(to_py)
    }

    /// Decodes `source` ids; returns `(tokens, log_prob, finished)`.
    #[pyo3(signature = (source, beam = 1, max_len = 40))]
    fn translate(&self, source: Vec<usize>, beam: usize, max_len: usize) -> PyResult<(Vec<usize>, f64, bool)> {
        let d = evaluator::beam_decode(&self.inner, &source, beam, max_len).map_err(to_py)?;
        Ok((d.tokens, d.log_prob, d.finished))
    }

    /// `(rep_ids, keys, values)` where `keys[i][l]` weights representation
    /// `rep_ids[i]` for decoder layer `l + 1`; `None` for the baseline.
    fn composition_weights(&self) -> Option<WeightExport> {
        let table = self.inner.composition_table()?;
        let (k, v) = table.export_matrices();
        let rows = |t: &compolab::tensor::Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
        Some((table.ids.iter().map(ToString::to_string).collect(), rows(&k), rows(&v)))
    }
}

#[pymodule]
#[pyo3(name = "compolab")]
pub fn compolab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grammar>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(cter, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

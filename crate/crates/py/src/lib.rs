//! Python bindings: run configs, pipeline stages, templates, scoring and a
//! standalone VAPM for poking at the prompt path from numpy.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use qa_prompts::numerics::{ParamStore, Tape, Tensor};
use qa_prompts::pipeline::{self, EvalOptions, RunConfig};
use qa_prompts::promptgen::{self, QaPair};
use qa_prompts::vapm::{Ablation, VapmConfig};
use qa_prompts::{reasoner, vqg, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(qa_prompts_py, QaPromptsError, PyException);
create_exception!(qa_prompts_py, ConfigError, QaPromptsError);
create_exception!(qa_prompts_py, DataError, QaPromptsError);
create_exception!(qa_prompts_py, ArtifactMismatchError, QaPromptsError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) => ConfigError::new_err(msg),
        Error::ArtifactMismatch(_) => ArtifactMismatchError::new_err(msg),
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Json(_)
        | Error::MissingBundle(_)
        | Error::MissingEmbedding(_)
        | Error::EmptyTable => DataError::new_err(msg),
        _ => QaPromptsError::new_err(msg),
    }
}

fn json_to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| to_py(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

/// A pipeline run configuration.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Reference hyperparameters on toy widths.
    #[new]
    fn new() -> Self {
        PyRunConfig {
            inner: RunConfig::default(),
        }
    }

    /// The profile tuned for the bundled synthetic world.
    #[staticmethod]
    fn toy() -> Self {
        PyRunConfig { inner: RunConfig::toy() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_json_str(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| to_py(e.into()))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = mode.parse().map_err(to_py)?;
        Ok(())
    }

    #[getter]
    fn no_fusion(&self) -> bool {
        self.inner.ablation.no_fusion
    }

    #[setter]
    fn set_no_fusion(&mut self, v: bool) {
        self.inner.ablation.no_fusion = v;
    }

    #[getter]
    fn no_decoder(&self) -> bool {
        self.inner.ablation.no_decoder
    }

    #[setter]
    fn set_no_decoder(&mut self, v: bool) {
        self.inner.ablation.no_decoder = v;
    }

    #[getter]
    fn top_p(&self) -> usize {
        self.inner.top_p
    }

    #[setter]
    fn set_top_p(&mut self, p: usize) {
        self.inner.top_p = p;
    }

    fn label(&self) -> String {
        self.inner.label()
    }

    fn vqg_hash(&self) -> String {
        self.inner.vqg_hash()
    }

    fn bundle_hash(&self) -> String {
        self.inner.bundle_hash()
    }

    fn reasoner_hash(&self) -> String {
        self.inner.reasoner_hash()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, label={:?})", self.inner.seed, self.inner.label())
    }
}

/// Generates a synthetic world into `out` and returns the path of its config.
#[pyfunction]
fn synth(config: &PyRunConfig, out: PathBuf) -> PyResult<PathBuf> {
    Ok(pipeline::synth(&config.inner, &out).map_err(to_py)?.config_path)
}

/// Pretrains the question decoder and trains the VQG connector. Returns the
/// loss curve summary as a dict.
#[pyfunction]
fn train_vqg(py: Python<'_>, config: &PyRunConfig, out: PathBuf) -> PyResult<Py<PyAny>> {
    let r = pipeline::train_vqg_stage(&config.inner, &out).map_err(to_py)?;
    json_to_py(py, &r.train)
}

/// Writes Top-P bundles for every sample; returns the records.
#[pyfunction]
fn gen_prompts(py: Python<'_>, config: &PyRunConfig, out: PathBuf) -> PyResult<Py<PyAny>> {
    let records = pipeline::gen_prompts_stage(&config.inner, &out).map_err(to_py)?;
    json_to_py(py, &records)
}

#[pyfunction]
fn train_vqa(py: Python<'_>, config: &PyRunConfig, out: PathBuf) -> PyResult<Py<PyAny>> {
    let r = pipeline::train_vqa_stage(&config.inner, &out).map_err(to_py)?;
    json_to_py(py, &r)
}

/// Scores the held-out samples and returns the report dict.
#[pyfunction]
#[pyo3(signature = (config, out, p_override=None, shuffle_bundles=false))]
fn evaluate(
    py: Python<'_>,
    config: &PyRunConfig,
    out: PathBuf,
    p_override: Option<usize>,
    shuffle_bundles: bool,
) -> PyResult<Py<PyAny>> {
    let opts = EvalOptions {
        p_override,
        shuffle_bundles,
    };
    let r = pipeline::eval_stage(&config.inner, &out, &opts).map_err(to_py)?;
    json_to_py(py, &r.report)
}

/// Markdown table over every report in `run_dir`.
#[pyfunction]
fn report(run_dir: PathBuf) -> PyResult<String> {
    pipeline::report_stage(&run_dir).map_err(to_py)
}

#[pyfunction]
fn render_vqg_instruction(answer: &str) -> PyResult<String> {
    vqg::render_vqg_instruction(answer).map_err(to_py)
}

#[pyfunction]
fn render_vqa_instruction(question: &str) -> PyResult<String> {
    reasoner::render_vqa_instruction(question).map_err(to_py)
}

#[pyfunction]
fn render_prompt_bundle(pairs: Vec<(String, String)>) -> String {
    let pairs: Vec<QaPair> = pairs.into_iter().map(|(q, a)| QaPair::new(q, a)).collect();
    promptgen::render_prompt_bundle(&pairs)
}

#[pyfunction]
fn parse_prompt_bundle(text: &str) -> PyResult<Vec<(String, String)>> {
    promptgen::parse_prompt_bundle(text).map_err(to_py)
}

#[pyfunction]
fn soft_accuracy(prediction: &str, answers: Vec<String>) -> PyResult<f64> {
    reasoner::soft_accuracy(prediction, &answers).map_err(to_py)
}

#[pyfunction]
fn normalize_answer(text: &str) -> String {
    reasoner::normalize_answer(text)
}

/// A freshly initialised VAPM with its own parameters.
#[pyclass(name = "Vapm")]
struct PyVapm {
    vapm: qa_prompts::vapm::Vapm,
    params: ParamStore,
}

#[pymethods]
impl PyVapm {
    /// `config` is a JSON object of VAPM fields; omitted fields take defaults.
    #[new]
    #[pyo3(signature = (config="{}", seed=0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let config: VapmConfig =
            serde_json::from_str(config).map_err(|e| PyValueError::new_err(format!("invalid VAPM config: {e}")))?;
        let vapm = qa_prompts::vapm::Vapm::new("vapm.", config);
        let mut params = ParamStore::new();
        vapm.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(PyVapm { vapm, params })
    }

    #[getter]
    fn k(&self) -> usize {
        self.vapm.config().k
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    /// Gated fusion of prompt states `f_s` [L_s × d_q] with image patches
    /// `e_v` [n × d_v]: a dict of `f_s`, `f_v_attn`, `lambda`, `f_m`.
    fn fusion(&self, py: Python<'_>, f_s: Vec<Vec<f64>>, e_v: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
        let mut tape = Tape::new();
        let f_s = tape.constant(tensor(f_s)?);
        let e_v = tape.constant(tensor(e_v)?);
        let vars = self
            .vapm
            .visual_gated_fusion(&mut tape, &self.params, f_s, e_v, false)
            .map_err(to_py)?;
        let out = vars.values(&tape);
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("f_s", out.f_s.to_rows())?;
        dict.set_item("f_v_attn", out.f_v_attn.to_rows())?;
        dict.set_item("lambda", out.lambda.to_rows())?;
        dict.set_item("f_m", out.f_m.to_rows())?;
        Ok(dict.into_any().unbind())
    }

    /// Prompt embeddings [k × d_lm], or [L_s × d_lm] with `no_decoder`.
    #[pyo3(signature = (f_s, e_v, no_fusion=false, no_decoder=false))]
    fn forward(&self, f_s: Vec<Vec<f64>>, e_v: Vec<Vec<f64>>, no_fusion: bool, no_decoder: bool) -> PyResult<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let f_s = tape.constant(tensor(f_s)?);
        let e_v = tape.constant(tensor(e_v)?);
        let ablation = Ablation { no_fusion, no_decoder };
        let out = self
            .vapm
            .forward(&mut tape, &self.params, f_s, e_v, ablation, false)
            .map_err(to_py)?;
        Ok(tape.value(out).to_rows())
    }
}

#[pymodule]
fn qa_prompts_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("QaPromptsError", py.get_type::<QaPromptsError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("ArtifactMismatchError", py.get_type::<ArtifactMismatchError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyVapm>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train_vqg, m)?)?;
    m.add_function(wrap_pyfunction!(gen_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(train_vqa, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(render_vqg_instruction, m)?)?;
    m.add_function(wrap_pyfunction!(render_vqa_instruction, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(parse_prompt_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(soft_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    Ok(())
}

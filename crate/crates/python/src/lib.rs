//! Python bindings for `fizle_core`.
//!
//! Structured results (records, reports) cross the boundary as plain
//! dicts and lists built from their JSON form, so Python sees exactly the
//! field names written to disk.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use fizle_core::campaign::{
    self, CampaignError, CampaignMode, ReportFormat, RunConfig, Services,
};
use fizle_core::domain::{self as core_domain, PredictedLabel, SampleInput};
use fizle_core::llm_backend::BackendSpec;
use fizle_core::metrics::{self, EditUnit, MetricsReport, PairOutcome};
use fizle_core::prompting::{self, TargetLabel, TargetStrategy};
use fizle_core::{parsing, scripted};

create_exception!(fizle, FizleError, PyException);
create_exception!(fizle, CampaignHalted, FizleError);

fn err(e: impl std::fmt::Display) -> PyErr {
    FizleError::new_err(e.to_string())
}

fn campaign_err(e: CampaignError) -> PyErr {
    match e {
        CampaignError::Halted { .. } => CampaignHalted::new_err(e.to_string()),
        other => err(other),
    }
}

fn parse<T: FromStr>(value: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// Serialize through JSON into the equivalent Python object.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = value.py().import("json")?;
    let text: String = json.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A classification task: id, prompt description, label set, input kind.
#[pyclass(frozen, skip_from_py_object, module = "fizle")]
#[derive(Clone)]
struct Task {
    inner: core_domain::TaskSpec,
}

#[pymethods]
impl Task {
    /// A built-in preset (`imdb`, `agnews`, `snli`) or a task JSON file.
    #[staticmethod]
    fn resolve(spec: &str) -> PyResult<Self> {
        core_domain::TaskSpec::resolve(spec)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        vec!["imdb", "agnews", "snli"]
    }

    #[getter]
    fn task_id(&self) -> &str {
        &self.inner.task_id
    }

    #[getter]
    fn description(&self) -> &str {
        &self.inner.description
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.names().to_vec()
    }

    #[getter]
    fn is_pair(&self) -> bool {
        self.inner.input_kind == core_domain::InputKind::TextPair
    }

    /// The canonical label for a classifier's raw output.
    fn canonicalize(&self, raw: &str) -> PyResult<String> {
        self.inner
            .labels
            .canonicalize(raw)
            .map(str::to_string)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Task({:?}, labels={:?})", self.inner.task_id, self.inner.labels.names())
    }
}

/// One labelled input: a single text, or a premise/hypothesis pair.
#[pyclass(frozen, skip_from_py_object, module = "fizle")]
#[derive(Clone)]
struct Sample {
    inner: core_domain::Sample,
}

#[pymethods]
impl Sample {
    #[new]
    #[pyo3(signature = (id, label, text=None, premise=None, hypothesis=None))]
    fn new(
        id: String,
        label: String,
        text: Option<String>,
        premise: Option<String>,
        hypothesis: Option<String>,
    ) -> PyResult<Self> {
        let input = match (text, premise, hypothesis) {
            (Some(t), None, None) => SampleInput::text(t),
            (None, Some(p), Some(h)) => SampleInput::pair(p, h),
            _ => {
                return Err(PyValueError::new_err(
                    "give either text or both premise and hypothesis",
                ))
            }
        };
        Ok(Self {
            inner: core_domain::Sample {
                id,
                input,
                gold_label: label,
            },
        })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn label(&self) -> &str {
        &self.inner.gold_label
    }

    /// Text as the prompts and the embedder see it.
    fn flattened(&self) -> String {
        self.inner.flattened()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Sample({:?}, label={:?})", self.inner.id, self.inner.gold_label)
    }
}

#[pyfunction]
fn load_dataset(path: PathBuf, task: &Task) -> PyResult<Vec<Sample>> {
    let samples = core_domain::load_dataset(&path, &task.inner).map_err(err)?;
    Ok(samples.into_iter().map(|inner| Sample { inner }).collect())
}

fn predicted(label: &str, task: &Task) -> PyResult<PredictedLabel> {
    PredictedLabel::new(label, None, &task.inner.labels).map_err(err)
}

fn target(label: &str, source: &str, task: &Task) -> PyResult<TargetLabel> {
    TargetLabel::new(label, source, &task.inner.labels).map_err(err)
}

/// Prompt asking for a counterfactual that moves `predicted` to `target`.
#[pyfunction]
fn render_naive(sample: &Sample, predicted_label: &str, target_label: &str, task: &Task) -> PyResult<String> {
    let p = predicted(predicted_label, task)?;
    let t = target(target_label, &p.label, task)?;
    prompting::render_naive_explanation(&sample.inner, &p, &t, &task.inner)
        .map(|r| r.text)
        .map_err(err)
}

/// First guided turn: ask for the words behind the prediction.
#[pyfunction]
fn render_guided_step1(sample: &Sample, predicted_label: &str, task: &Task) -> PyResult<String> {
    let p = predicted(predicted_label, task)?;
    prompting::render_guided_step1(&sample.inner, &p, &task.inner)
        .map(|r| r.text)
        .map_err(err)
}

/// Second guided turn: edit only the identified words.
#[pyfunction]
fn render_guided_step2(words: Vec<String>, predicted_label: &str, target_label: &str, task: &Task) -> PyResult<String> {
    let p = predicted(predicted_label, task)?;
    let t = target(target_label, &p.label, task)?;
    prompting::render_guided_step2(&words, &p, &t)
        .map(|r| r.text)
        .map_err(err)
}

/// Prompt for a label-preserving contrast example.
#[pyfunction]
fn render_contrast(sample: &Sample, task: &Task) -> PyResult<String> {
    prompting::render_contrast(&sample.inner, &task.inner)
        .map(|r| r.text)
        .map_err(err)
}

/// Target label for a counterfactual; `strategy` is `cyclic-next`,
/// `fixed:LABEL` or `seeded-random-other`.
#[pyfunction]
#[pyo3(signature = (task, source, strategy="cyclic-next", seed=0, sample_id=""))]
fn select_target_label(task: &Task, source: &str, strategy: &str, seed: u64, sample_id: &str) -> PyResult<String> {
    let strategy: TargetStrategy = parse(strategy)?;
    prompting::select_target_label(&task.inner.labels, source, &strategy, seed, sample_id)
        .map(|t| t.label().to_string())
        .map_err(err)
}

/// Text inside the first `<new>` span, or `None` when there is no usable
/// span (and `fallback` is off, or the response is blank).
#[pyfunction]
#[pyo3(signature = (completion, fallback=false))]
fn extract_tagged(completion: &str, fallback: bool) -> Option<String> {
    parsing::extract_tagged(completion, fallback).ok().map(|p| p.text)
}

/// Words from a comma-separated list; empty when nothing survives cleaning.
#[pyfunction]
fn parse_word_list(completion: &str) -> Vec<String> {
    parsing::parse_word_list(completion)
        .map(|w| w.words().to_vec())
        .unwrap_or_default()
}

#[pyfunction]
#[pyo3(signature = (a, b, unit="char"))]
fn levenshtein(a: &str, b: &str, unit: &str) -> PyResult<usize> {
    Ok(metrics::levenshtein_in(a, b, parse::<EditUnit>(unit)?))
}

#[pyfunction]
#[pyo3(signature = (a, b, unit="char"))]
fn normalized_edit_distance(a: &str, b: &str, unit: &str) -> PyResult<f64> {
    metrics::normalized_edit_distance_in(a, b, parse::<EditUnit>(unit)?)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn metric_err(e: metrics::MetricsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Percentage of pairs whose counterfactual label differs from the original.
#[pyfunction]
fn label_flip_score(original: Vec<String>, counterfactual: Vec<String>) -> PyResult<f64> {
    if original.len() != counterfactual.len() {
        return Err(PyValueError::new_err("label lists differ in length"));
    }
    let outcomes: Vec<PairOutcome> = original
        .iter()
        .zip(&counterfactual)
        .enumerate()
        .map(|(i, (o, c))| PairOutcome::evaluated(i.to_string(), o, o, c, 0.0, 0.0))
        .collect();
    metrics::label_flip_score(&outcomes).map_err(metric_err)
}

/// Percentage of predictions equal to their gold label.
#[pyfunction]
fn accuracy(predicted: Vec<String>, gold: Vec<String>) -> PyResult<f64> {
    if predicted.len() != gold.len() {
        return Err(PyValueError::new_err("label lists differ in length"));
    }
    let pairs: Vec<(&String, &String)> = predicted.iter().zip(&gold).collect();
    metrics::accuracy(&pairs).map_err(metric_err)
}

/// Percentage of samples where both the original and its contrast example
/// are classified as the shared gold label.
#[pyfunction]
fn consistency(gold: Vec<String>, original: Vec<String>, contrast: Vec<String>) -> PyResult<f64> {
    if gold.len() != original.len() || gold.len() != contrast.len() {
        return Err(PyValueError::new_err("label lists differ in length"));
    }
    let outcomes: Vec<PairOutcome> = (0..gold.len())
        .map(|i| {
            PairOutcome::evaluated(i.to_string(), &gold[i], &original[i], &contrast[i], 0.0, 0.0)
                .with_contrast_gold()
        })
        .collect();
    metrics::consistency(&outcomes).map_err(metric_err)
}

/// Cache key of a chat request.
#[pyfunction]
#[pyo3(signature = (messages, model, sampling=None))]
fn fingerprint<'py>(messages: &Bound<'py, PyAny>, model: &str, sampling: Option<&Bound<'py, PyAny>>) -> PyResult<String> {
    let messages: Vec<fizle_core::ChatMessage> = from_py(messages)?;
    let params = match sampling {
        Some(s) => from_py(s)?,
        None => fizle_core::SamplingParams::default(),
    };
    Ok(fizle_core::llm_backend::fingerprint(&messages, &params, model))
}

/// Run (or resume) a campaign and return its report as a dict.
///
/// With `scripted=True` the built-in offline generator and keyword oracles
/// stand in for every server, and the URLs may be omitted.
#[pyfunction]
#[pyo3(signature = (
    task, dataset, mode, out_dir, *,
    endpoint=None, model=None, backend_id=None, auth_env=None,
    classifier_url=None, embedder_url=None, scripted=false,
    limit=None, seed=0, workers=4, strict_lfs=false, fallback=None,
    edit_unit="char", target_strategy="cyclic-next", cache_dir=None,
))]
#[allow(clippy::too_many_arguments)]
fn run_campaign<'py>(
    py: Python<'py>,
    task: &Task,
    dataset: PathBuf,
    mode: &str,
    out_dir: PathBuf,
    endpoint: Option<String>,
    model: Option<String>,
    backend_id: Option<String>,
    auth_env: Option<String>,
    classifier_url: Option<String>,
    embedder_url: Option<String>,
    scripted: bool,
    limit: Option<usize>,
    seed: u64,
    workers: usize,
    strict_lfs: bool,
    fallback: Option<bool>,
    edit_unit: &str,
    target_strategy: &str,
    cache_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    const PLACEHOLDER: &str = "http://scripted.invalid";
    let url = |v: Option<String>, name: &str| match v {
        Some(v) => Ok(v),
        None if scripted => Ok(PLACEHOLDER.to_string()),
        None => Err(PyValueError::new_err(format!("{name} is required"))),
    };
    let model = match model {
        Some(m) => m,
        None if scripted => "scripted-rewriter".to_string(),
        None => return Err(PyValueError::new_err("model is required")),
    };
    let endpoint = url(endpoint, "endpoint")?;
    let mut backend = BackendSpec::new(
        backend_id.unwrap_or_else(|| if scripted { "scripted".into() } else { model.clone() }),
        endpoint,
        model,
    )
    .map_err(err)?;
    backend.auth = auth_env;
    let mut config = RunConfig::new(
        task.inner.clone(),
        dataset,
        parse::<CampaignMode>(mode)?,
        backend,
        url(classifier_url, "classifier_url")?,
        url(embedder_url, "embedder_url")?,
        out_dir,
    );
    config.limit = limit;
    config.seed = seed;
    config.workers = workers;
    config.strict_lfs = strict_lfs;
    config.fallback = fallback;
    config.edit_unit = parse(edit_unit)?;
    config.target_strategy = parse(target_strategy)?;
    config.cache_dir = cache_dir;
    config.validate().map_err(campaign_err)?;

    let result = py.detach(move || {
        let services = if scripted {
            scripted::services(&config)?
        } else {
            Services::http(&config)?
        };
        campaign::run_campaign(&config, &services)
    });
    to_py(py, &result.map_err(campaign_err)?.report)
}

/// Report of a finished run directory.
#[pyfunction]
fn load_report<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &campaign::load_run_report(&run_dir).map_err(campaign_err)?)
}

/// Generation records of a run, in dataset order once finalized.
#[pyfunction]
fn load_records<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let records = campaign::read_records(&run_dir.join(campaign::RECORDS_FILE)).map_err(campaign_err)?;
    let list: Vec<_> = records.into_values().collect();
    to_py(py, &list)
}

/// Render report dicts (or run directories) as `table`, `csv` or `json`.
#[pyfunction]
#[pyo3(signature = (reports, format="table"))]
fn render_report(reports: Vec<Bound<'_, PyAny>>, format: &str) -> PyResult<String> {
    let format: ReportFormat = parse(format)?;
    let reports = reports
        .iter()
        .map(|r| match r.extract::<PathBuf>() {
            Ok(dir) => campaign::load_run_report(&dir).map_err(campaign_err),
            Err(_) => from_py::<MetricsReport>(r),
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(campaign::render_report(&reports, format))
}

#[pymodule]
fn fizle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FizleError", m.py().get_type::<FizleError>())?;
    m.add("CampaignHalted", m.py().get_type::<CampaignHalted>())?;
    m.add_class::<Task>()?;
    m.add_class::<Sample>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(render_naive, m)?)?;
    m.add_function(wrap_pyfunction!(render_guided_step1, m)?)?;
    m.add_function(wrap_pyfunction!(render_guided_step2, m)?)?;
    m.add_function(wrap_pyfunction!(render_contrast, m)?)?;
    m.add_function(wrap_pyfunction!(select_target_label, m)?)?;
    m.add_function(wrap_pyfunction!(extract_tagged, m)?)?;
    m.add_function(wrap_pyfunction!(parse_word_list, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(label_flip_score, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(consistency, m)?)?;
    m.add_function(wrap_pyfunction!(fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(load_report, m)?)?;
    m.add_function(wrap_pyfunction!(load_records, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    Ok(())
}

//! Campaign orchestration: filtering, generation, evaluation, persistence
//! and resume.

mod manifest;
mod record;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use manifest::{FilterCounts, RunManifest, SampleStatus, MANIFEST_FORMAT};
pub use record::{read_records, GenerationFailure, GenerationRecord, RecordStatus};
pub use report::{load_run_report, render_report, ReportFormat};

use crate::domain::{load_dataset, DomainError, PredictedLabel, Sample, SampleInput, TaskSpec};
use crate::llm_backend::{
    BackendError, BackendSpec, CacheError, ChatMessage, ChatTransport, Completion, LlmClient,
    ResponseCache, RetryPolicy, SamplingParams,
};
use crate::metrics::{
    inner_product, normalized_edit_distance_in, summarize, EditUnit, MetricsError, MetricsReport,
    PairOutcome,
};
use crate::oracle_clients::{
    ClassifierClient, ClassifierEndpoint, EmbeddingClient, OracleError, OracleTransport,
};
use crate::parsing::{extract_tagged, parse_word_list, ParsedCounterfactual};
use crate::prompting::{
    select_target_label, PromptError, RenderedPrompt, TargetLabel, TargetStrategy, TemplateSet,
};
use record::{write_records_atomic, RecordLog};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("corrupt run state: {0}")]
    Corrupt(String),
    #[error("existing run does not match this configuration:\n  {}", .0.join("\n  "))]
    ResumeMismatch(Vec<String>),
    #[error("run halted at sample '{sample_id}' after retries were exhausted: {reason}; resume to continue")]
    Halted { sample_id: String, reason: String },
    #[error("run in {0} is not finalized")]
    Unfinalized(PathBuf),
}

impl CampaignError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CampaignError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CampaignMode {
    Naive,
    Guided,
    Contrast,
}

impl CampaignMode {
    pub fn is_contrast(self) -> bool {
        self == CampaignMode::Contrast
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CampaignMode::Naive => "naive",
            CampaignMode::Guided => "guided",
            CampaignMode::Contrast => "contrast",
        }
    }
}

impl fmt::Display for CampaignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CampaignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(CampaignMode::Naive),
            "guided" => Ok(CampaignMode::Guided),
            "contrast" => Ok(CampaignMode::Contrast),
            other => Err(format!("unknown mode '{other}' (naive, guided, contrast)")),
        }
    }
}

/// What a generated text replaces when the task input is a text pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairRewrite {
    /// Keep the premise; the generation becomes the hypothesis.
    #[default]
    Hypothesis,
    /// The generation must restate both fields as `premise: ...` /
    /// `hypothesis: ...`.
    WholePair,
}

impl FromStr for PairRewrite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "hypothesis" => Ok(PairRewrite::Hypothesis),
            "whole-pair" => Ok(PairRewrite::WholePair),
            other => Err(format!(
                "unknown pair rewrite '{other}' (hypothesis, whole-pair)"
            )),
        }
    }
}

fn default_truncate() -> usize {
    6000
}

fn default_workers() -> usize {
    4
}

fn default_oracle_in_flight() -> usize {
    8
}

fn default_oracle_timeout() -> u64 {
    60
}

/// Everything that determines a campaign's results, plus execution knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub dataset: PathBuf,
    pub mode: CampaignMode,
    pub backend: BackendSpec,
    #[serde(default)]
    pub sampling: SamplingParams,
    pub classifier_url: String,
    pub embedder_url: String,
    #[serde(default)]
    pub target_strategy: TargetStrategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub limit: Option<usize>,
    /// Accept a tagless completion as the whole generation. Defaults to on
    /// for contrast runs and off otherwise.
    #[serde(default)]
    pub fallback: Option<bool>,
    #[serde(default)]
    pub strict_lfs: bool,
    #[serde(default)]
    pub edit_unit: EditUnit,
    #[serde(default)]
    pub pair_rewrite: PairRewrite,
    /// Per-field character cap applied before prompting.
    #[serde(default = "default_truncate")]
    pub truncate_chars: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_oracle_in_flight")]
    pub oracle_in_flight: usize,
    #[serde(default = "default_oracle_timeout")]
    pub oracle_timeout_secs: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(
        task: TaskSpec,
        dataset: impl Into<PathBuf>,
        mode: CampaignMode,
        backend: BackendSpec,
        classifier_url: impl Into<String>,
        embedder_url: impl Into<String>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            task,
            dataset: dataset.into(),
            mode,
            backend,
            sampling: SamplingParams::default(),
            classifier_url: classifier_url.into(),
            embedder_url: embedder_url.into(),
            target_strategy: TargetStrategy::default(),
            seed: 0,
            limit: None,
            fallback: None,
            strict_lfs: false,
            edit_unit: EditUnit::default(),
            pair_rewrite: PairRewrite::default(),
            truncate_chars: default_truncate(),
            workers: default_workers(),
            retry: RetryPolicy::default(),
            oracle_in_flight: default_oracle_in_flight(),
            oracle_timeout_secs: default_oracle_timeout(),
            out_dir: out_dir.into(),
            cache_dir: None,
            templates_dir: None,
        }
    }

    pub fn fallback_enabled(&self) -> bool {
        self.fallback.unwrap_or(self.mode.is_contrast())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join(MANIFEST_FILE)
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::Config(m));
        self.backend
            .validate()
            .map_err(|e| CampaignError::Config(e.to_string()))?;
        self.sampling
            .validate()
            .map_err(|e| CampaignError::Config(e.to_string()))?;
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.truncate_chars == 0 {
            return bad("truncate_chars must be positive".into());
        }
        if self.oracle_in_flight == 0 {
            return bad("oracle_in_flight must be positive".into());
        }
        if self.limit == Some(0) {
            return bad("limit must be positive".into());
        }
        if let TargetStrategy::Fixed(label) = &self.target_strategy {
            if !self.task.labels.contains(label) {
                return bad(format!(
                    "fixed target '{label}' is not a label of {}",
                    self.task.task_id
                ));
            }
        }
        if self.task.input_kind == crate::domain::InputKind::SingleText
            && self.pair_rewrite == PairRewrite::WholePair
        {
            return bad("whole-pair rewrite needs a text-pair task".into());
        }
        Ok(())
    }

    fn templates(&self) -> Result<TemplateSet, CampaignError> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        })
    }
}

/// The three external collaborators of a campaign.
#[derive(Debug, Clone)]
pub struct Services {
    pub llm: Arc<LlmClient>,
    pub classifier: Arc<ClassifierClient>,
    pub embedder: Arc<EmbeddingClient>,
}

impl Services {
    /// HTTP clients for every collaborator, with caches under the
    /// configured cache directory.
    pub fn http(config: &RunConfig) -> Result<Self, CampaignError> {
        let caches = Caches::open(&config.cache_dir())?;
        let timeout = Duration::from_secs(config.oracle_timeout_secs);
        let classifier = ClassifierClient::http(
            classifier_endpoint(config),
            caches.classify,
            config.retry.clone(),
            config.oracle_in_flight,
            timeout,
        )
        .map_err(|e| CampaignError::Config(e.to_string()))?;
        let embedder = EmbeddingClient::http(
            &config.embedder_url,
            caches.embed,
            config.retry.clone(),
            config.oracle_in_flight,
            timeout,
        )
        .map_err(|e| CampaignError::Config(e.to_string()))?;
        Ok(Self {
            llm: Arc::new(LlmClient::http(
                config.backend.clone(),
                caches.completions,
                config.retry.clone(),
            )),
            classifier: Arc::new(classifier),
            embedder: Arc::new(embedder),
        })
    }

    /// Clients over caller-supplied transports, sharing the on-disk caches
    /// that [`Services::http`] would use.
    pub fn with_transports(
        config: &RunConfig,
        chat: Arc<dyn ChatTransport>,
        classifier: Arc<dyn OracleTransport>,
        embedder: Arc<dyn OracleTransport>,
    ) -> Result<Self, CampaignError> {
        let caches = Caches::open(&config.cache_dir())?;
        Ok(Self {
            llm: Arc::new(LlmClient::new(
                config.backend.clone(),
                chat,
                caches.completions,
                config.retry.clone(),
            )),
            classifier: Arc::new(ClassifierClient::new(
                classifier_endpoint(config),
                classifier,
                caches.classify,
                config.retry.clone(),
                config.oracle_in_flight,
            )),
            embedder: Arc::new(EmbeddingClient::new(
                config.embedder_url.clone(),
                embedder,
                caches.embed,
                config.retry.clone(),
                config.oracle_in_flight,
            )),
        })
    }

    /// Network calls made so far by all three clients.
    pub fn network_calls(&self) -> usize {
        self.llm.network_calls() + self.classifier.network_calls() + self.embedder.network_calls()
    }
}

fn classifier_endpoint(config: &RunConfig) -> ClassifierEndpoint {
    ClassifierEndpoint {
        endpoint: config.classifier_url.clone(),
        task_id: config.task.task_id.clone(),
        labels: config.task.labels.clone(),
    }
}

struct Caches {
    completions: Arc<ResponseCache>,
    classify: Arc<ResponseCache>,
    embed: Arc<ResponseCache>,
}

impl Caches {
    fn open(dir: &Path) -> Result<Self, CampaignError> {
        std::fs::create_dir_all(dir).map_err(|e| CampaignError::io(dir, e))?;
        let open = |name: &str| ResponseCache::open(&dir.join(name)).map(Arc::new);
        Ok(Self {
            completions: open("completions.jsonl")?,
            classify: open("classify.jsonl")?,
            embed: open("embed.jsonl")?,
        })
    }
}

/// Result of classifying originals before explanation generation.
#[derive(Debug, Clone, Default)]
pub struct FilterResult {
    pub kept: Vec<(Sample, PredictedLabel)>,
    pub dropped: Vec<(Sample, PredictedLabel)>,
    pub errored: Vec<(Sample, String)>,
}

/// Keep the samples whose classifier prediction equals the gold label.
/// Permanent per-sample errors are counted, a retriable one halts.
pub fn filter_correctly_predicted(
    samples: &[Sample],
    classifier: &ClassifierClient,
    workers: usize,
) -> Result<FilterResult, CampaignError> {
    let stop = AtomicBool::new(false);
    let mut slots: Vec<Option<Result<PredictedLabel, OracleError>>> =
        (0..samples.len()).map(|_| None).collect();
    run_pool(
        samples,
        workers,
        None,
        &stop,
        |s| classifier.classify(&s.input),
        |idx, result| {
            let halt = matches!(&result, Err(e) if e.is_retriable());
            slots[idx] = Some(result);
            !halt
        },
    );
    let mut out = FilterResult::default();
    for (sample, slot) in samples.iter().zip(slots) {
        match slot {
            None => {}
            Some(Ok(pred)) if pred.label == sample.gold_label => {
                out.kept.push((sample.clone(), pred))
            }
            Some(Ok(pred)) => out.dropped.push((sample.clone(), pred)),
            Some(Err(e)) if e.is_retriable() => {
                return Err(CampaignError::Halted {
                    sample_id: sample.id.clone(),
                    reason: e.to_string(),
                })
            }
            Some(Err(e)) => out.errored.push((sample.clone(), e.to_string())),
        }
    }
    Ok(out)
}

/// Outcome of [`run_campaign`].
#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub records: Vec<GenerationRecord>,
    pub report: MetricsReport,
    pub manifest: RunManifest,
}

/// Test hook: stop dispatching after this many new samples, leaving the run
/// unfinalized as if the process had been killed between samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunLimits {
    pub max_new_samples: Option<usize>,
}

/// Run (or continue) the campaign described by `config`. An existing
/// manifest in the output directory is resumed when it matches and refused
/// otherwise.
pub fn run_campaign(
    config: &RunConfig,
    services: &Services,
) -> Result<CampaignResult, CampaignError> {
    run_campaign_with(config, services, RunLimits::default())?
        .ok_or_else(|| CampaignError::Unfinalized(config.out_dir.clone()))
}

/// Continue the run recorded in `manifest_path`. Credentials are not
/// persisted, so `auth_from` may supply a backend spec to take them from.
pub fn resume_config(
    manifest_path: &Path,
    auth_from: Option<&BackendSpec>,
) -> Result<RunConfig, CampaignError> {
    let manifest = RunManifest::load(manifest_path)?;
    let mut config = manifest.config;
    config.out_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if let Some(spec) = auth_from {
        if spec.backend_id == config.backend.backend_id {
            config.backend.auth = spec.auth.clone();
        }
    }
    Ok(config)
}

/// Like [`run_campaign`]; returns `None` when [`RunLimits`] stopped the run
/// before every sample was processed.
pub fn run_campaign_with(
    config: &RunConfig,
    services: &Services,
    limits: RunLimits,
) -> Result<Option<CampaignResult>, CampaignError> {
    config.validate()?;
    let templates = config.templates()?;
    let mut samples = load_dataset(&config.dataset, &config.task)?;
    if let Some(limit) = config.limit {
        samples.truncate(limit);
    }
    if samples.is_empty() {
        return Err(CampaignError::EmptyDataset);
    }
    let dataset_hash = file_sha256(&config.dataset)?;
    let template_versions = templates.versions();

    std::fs::create_dir_all(&config.out_dir).map_err(|e| CampaignError::io(&config.out_dir, e))?;
    let manifest_path = config.manifest_path();
    let records_path = config.out_dir.join(RECORDS_FILE);

    let mut manifest = if manifest_path.exists() {
        let existing = RunManifest::load(&manifest_path)?;
        let diffs = existing.resume_conflicts(config, &dataset_hash, &template_versions);
        if !diffs.is_empty() {
            return Err(CampaignError::ResumeMismatch(diffs));
        }
        existing
    } else {
        let now = chrono::Utc::now().to_rfc3339();
        RunManifest {
            format_version: MANIFEST_FORMAT,
            config: config.clone(),
            dataset_hash: dataset_hash.clone(),
            template_versions: template_versions.clone(),
            filter: None,
            samples: samples
                .iter()
                .map(|s| (s.id.clone(), SampleStatus::Pending))
                .collect(),
            finalized: false,
            report_hash: None,
            created_at: now.clone(),
            updated_at: now,
        }
    };
    manifest.config = config.clone();

    let mut done = read_records(&records_path)?;
    if manifest.finalized && done.len() == manifest.filter.map_or(samples.len(), |f| f.kept) {
        let records: Vec<GenerationRecord> =
            samples.iter().filter_map(|s| done.remove(&s.id)).collect();
        let report = build_report(config, &manifest, &samples, &records)?;
        return Ok(Some(CampaignResult {
            records,
            report,
            manifest,
        }));
    }
    manifest.finalized = false;
    manifest.report_hash = None;
    manifest.save(&manifest_path)?;

    // Originals to generate from, each with its classifier verdict when
    // the filter has already produced it.
    let work: Vec<(Sample, Option<PredictedLabel>)> = if config.mode.is_contrast() {
        samples.iter().map(|s| (s.clone(), None)).collect()
    } else {
        let pending: Vec<Sample> = samples
            .iter()
            .filter(|s| !done.contains_key(&s.id))
            .cloned()
            .collect();
        let filtered = filter_correctly_predicted(&samples, &services.classifier, config.workers)
            .inspect_err(|_| {
            let _ = manifest.save(&manifest_path);
        })?;
        let counts = FilterCounts {
            kept: filtered.kept.len(),
            dropped: filtered.dropped.len(),
            errored: filtered.errored.len(),
        };
        tracing::info!(
            kept = counts.kept,
            dropped = counts.dropped,
            errored = counts.errored,
            "filtered originals"
        );
        for (s, _) in &filtered.dropped {
            manifest.samples.insert(s.id.clone(), SampleStatus::Dropped);
        }
        for (s, _) in &filtered.errored {
            manifest
                .samples
                .insert(s.id.clone(), SampleStatus::FilterErrored);
        }
        manifest.filter = Some(counts);
        manifest.save(&manifest_path)?;
        let pending_ids: HashSet<&str> = pending.iter().map(|s| s.id.as_str()).collect();
        filtered
            .kept
            .into_iter()
            .filter(|(s, _)| pending_ids.contains(s.id.as_str()))
            .map(|(s, p)| (s, Some(p)))
            .collect()
    };
    let todo: Vec<(Sample, Option<PredictedLabel>)> = work
        .into_iter()
        .filter(|(s, _)| !done.contains_key(&s.id))
        .collect();

    tracing::info!(
        pending = todo.len(),
        already_done = done.len(),
        mode = %config.mode,
        "processing samples"
    );
    let generator = Generator {
        config,
        services,
        templates: &templates,
    };
    let mut log = RecordLog::open(&records_path)?;
    let stop = AtomicBool::new(false);
    let mut halt: Option<CampaignError> = None;
    let mut last_save = Instant::now();
    let mut io_error: Option<CampaignError> = None;
    run_pool(
        &todo,
        config.workers,
        limits.max_new_samples,
        &stop,
        |(sample, pred)| generator.process(sample, pred.as_ref()),
        |_, result| match result {
            Ok(record) => {
                if let Err(e) = log.append(&record) {
                    io_error = Some(e);
                    return false;
                }
                manifest
                    .samples
                    .insert(record.sample_id.clone(), status_of(&record));
                tracing::debug!(sample = %record.sample_id, status = ?record.status, "sample done");
                done.insert(record.sample_id.clone(), record);
                if last_save.elapsed() >= Duration::from_secs(1) {
                    last_save = Instant::now();
                    if let Err(e) = manifest.save(&manifest_path) {
                        io_error = Some(e);
                        return false;
                    }
                }
                true
            }
            Err(e) => {
                tracing::warn!(error = %e, "halting campaign");
                if halt.is_none() {
                    halt = Some(e);
                }
                false
            }
        },
    );
    manifest.save(&manifest_path)?;
    if let Some(e) = io_error.or(halt) {
        return Err(e);
    }

    let expected: Vec<&Sample> = if config.mode.is_contrast() {
        samples.iter().collect()
    } else {
        samples
            .iter()
            .filter(|s| {
                !matches!(
                    manifest.samples.get(&s.id),
                    Some(SampleStatus::Dropped | SampleStatus::FilterErrored)
                )
            })
            .collect()
    };
    if expected.iter().any(|s| !done.contains_key(&s.id)) {
        return Ok(None);
    }

    let records: Vec<GenerationRecord> =
        expected.iter().filter_map(|s| done.remove(&s.id)).collect();
    write_records_atomic(&records_path, &records)?;
    let report = build_report(config, &manifest, &samples, &records)?;
    let report_json = report::write_run_reports(&config.out_dir, &report)?;
    manifest.report_hash = Some(hex::encode(Sha256::digest(report_json.as_bytes())));
    manifest.finalized = true;
    manifest.save(&manifest_path)?;
    tracing::info!(out = %config.out_dir.display(), "campaign finalized");
    Ok(Some(CampaignResult {
        records,
        report,
        manifest,
    }))
}

fn status_of(record: &GenerationRecord) -> SampleStatus {
    match record.status {
        RecordStatus::Ok => SampleStatus::Done,
        RecordStatus::GenerationFailed => SampleStatus::GenerationFailed,
        RecordStatus::Errored => SampleStatus::Errored,
    }
}

fn build_report(
    config: &RunConfig,
    manifest: &RunManifest,
    samples: &[Sample],
    records: &[GenerationRecord],
) -> Result<MetricsReport, CampaignError> {
    let contrast = config.mode.is_contrast();
    let outcomes: Vec<PairOutcome> = records.iter().filter_map(|r| r.outcome.clone()).collect();
    let n_errored = records
        .iter()
        .filter(|r| r.status == RecordStatus::Errored)
        .count();
    let summary = summarize(&outcomes, contrast, config.strict_lfs)?;
    let filter = manifest.filter.unwrap_or_default();
    let n_kept = if contrast { samples.len() } else { filter.kept };
    debug_assert_eq!(summary.n_evaluated + summary.n_failed + n_errored, n_kept);
    let failure_rate_pct = if n_kept == 0 {
        0.0
    } else {
        100.0 * (n_kept - summary.n_evaluated) as f64 / n_kept as f64
    };
    Ok(MetricsReport {
        task_id: config.task.task_id.clone(),
        backend_id: config.backend.backend_id.clone(),
        model_name: config.backend.model_name.clone(),
        variant: config.mode,
        edit_unit: config.edit_unit,
        strict_lfs: config.strict_lfs,
        n_input: samples.len(),
        n_kept,
        n_dropped: if contrast { 0 } else { filter.dropped },
        n_filter_errored: if contrast { 0 } else { filter.errored },
        n_evaluated: summary.n_evaluated,
        n_failed: summary.n_failed,
        n_errored,
        n_fallback_naive: records.iter().filter(|r| r.fallback_naive).count(),
        failure_rate_pct,
        lfs_pct: summary.lfs_pct,
        mean_semantic_sim: summary.mean_semantic_sim,
        mean_edit_dist: summary.mean_edit_dist,
        original_accuracy_pct: summary.original_accuracy_pct,
        contrast_accuracy_pct: summary.contrast_accuracy_pct,
        consistency_pct: summary.consistency_pct,
    })
}

/// Split a `premise: ...` / `hypothesis: ...` rendering back into fields.
pub fn parse_flattened_pair(text: &str) -> Option<(String, String)> {
    let lower = text.to_lowercase();
    // Lowercasing can change byte lengths outside ASCII; bail out then.
    if lower.len() != text.len() {
        return None;
    }
    let head = lower.trim_start();
    let offset = lower.len() - head.len();
    if !head.starts_with("premise:") {
        return None;
    }
    let p_start = offset + "premise:".len();
    let h_pos = lower[p_start..].find("hypothesis:")? + p_start;
    let premise = text[p_start..h_pos].trim();
    let hypothesis = text[h_pos + "hypothesis:".len()..].trim();
    if premise.is_empty() || hypothesis.is_empty() {
        return None;
    }
    Some((premise.to_string(), hypothesis.to_string()))
}

/// Per-sample failure that stops the campaign, as opposed to one that is
/// recorded.
type Halt = CampaignError;

enum Step<T> {
    Done(T),
    Failed(GenerationFailure),
    Errored(String),
}

struct Generator<'a> {
    config: &'a RunConfig,
    services: &'a Services,
    templates: &'a TemplateSet,
}

impl Generator<'_> {
    fn process(
        &self,
        sample: &Sample,
        filtered: Option<&PredictedLabel>,
    ) -> Result<GenerationRecord, Halt> {
        let original = match filtered {
            Some(p) => p.clone(),
            None => match self.classify(sample, &sample.input)? {
                Ok(p) => p,
                Err(msg) => {
                    let mut r = GenerationRecord::new(&sample.id, self.config.mode, None);
                    r.status = RecordStatus::Errored;
                    r.error = Some(format!("classify original: {msg}"));
                    return Ok(r);
                }
            },
        };
        let mut record =
            GenerationRecord::new(&sample.id, self.config.mode, Some(original.clone()));
        let (prompt_input, truncated) = sample.input.truncated(self.config.truncate_chars);
        record.truncated = truncated;
        let prompt_sample = Sample {
            id: sample.id.clone(),
            input: prompt_input,
            gold_label: sample.gold_label.clone(),
        };

        let generated = match self.config.mode {
            CampaignMode::Contrast => self.contrast(&prompt_sample, &mut record)?,
            CampaignMode::Naive | CampaignMode::Guided => {
                let target = select_target_label(
                    &self.config.task.labels,
                    &original.label,
                    &self.config.target_strategy,
                    self.config.seed,
                    &sample.id,
                )?;
                record.target_label = Some(target.label().to_string());
                if self.config.mode == CampaignMode::Guided {
                    self.guided(&prompt_sample, &original, &target, &mut record)?
                } else {
                    self.naive(&prompt_sample, &original, &target, &mut record)?
                }
            }
        };
        let parsed = match generated {
            Step::Done(p) => p,
            Step::Failed(f) => return Ok(self.fail(record, sample, &original, f)),
            Step::Errored(msg) => return Ok(errored(record, msg)),
        };
        let cf_input = match self.counterfactual_input(&prompt_sample.input, &parsed.text) {
            Some(input) => input,
            None => {
                record.counterfactual = Some(parsed);
                return Ok(self.fail(
                    record,
                    sample,
                    &original,
                    GenerationFailure::PairUnparseable,
                ));
            }
        };
        record.counterfactual = Some(parsed);
        record.counterfactual_input = Some(cf_input.clone());

        let cf_pred = match self.classify(sample, &cf_input)? {
            Ok(p) => p,
            Err(msg) => return Ok(errored(record, format!("classify counterfactual: {msg}"))),
        };
        record.counterfactual_prediction = Some(cf_pred.clone());

        let orig_flat = prompt_sample.input.flatten();
        let cf_flat = cf_input.flatten();
        let sim = match self
            .services
            .embedder
            .embed(&[orig_flat.clone(), cf_flat.clone()])
        {
            Ok(v) => inner_product(&v[0], &v[1])?,
            Err(e) if e.is_retriable() => return Err(halted(sample, e)),
            Err(e) => return Ok(errored(record, format!("embed: {e}"))),
        };
        let dist = normalized_edit_distance_in(&orig_flat, &cf_flat, self.config.edit_unit)?;
        let mut outcome = PairOutcome::evaluated(
            &sample.id,
            &sample.gold_label,
            &original.label,
            &cf_pred.label,
            dist,
            sim,
        );
        if self.config.mode.is_contrast() {
            outcome = outcome.with_contrast_gold();
        }
        record.outcome = Some(outcome);
        Ok(record)
    }

    fn fail(
        &self,
        mut record: GenerationRecord,
        sample: &Sample,
        original: &PredictedLabel,
        failure: GenerationFailure,
    ) -> GenerationRecord {
        record.status = RecordStatus::GenerationFailed;
        record.failure = Some(failure);
        let mut outcome = PairOutcome::failed(&sample.id, &sample.gold_label, &original.label);
        if self.config.mode.is_contrast() {
            outcome = outcome.with_contrast_gold();
        }
        record.outcome = Some(outcome);
        record
    }

    /// Inner `Err` is a permanent error to record against the sample.
    fn classify(
        &self,
        sample: &Sample,
        input: &SampleInput,
    ) -> Result<Result<PredictedLabel, String>, Halt> {
        match self.services.classifier.classify(input) {
            Ok(p) => Ok(Ok(p)),
            Err(e) if e.is_retriable() => Err(halted(sample, e)),
            Err(e) => Ok(Err(e.to_string())),
        }
    }

    fn chat(
        &self,
        sample: &Sample,
        messages: &[ChatMessage],
        record: &mut GenerationRecord,
    ) -> Result<Step<Completion>, Halt> {
        match self.services.llm.complete(messages, &self.config.sampling) {
            Ok(c) => {
                record.completions.push(c.clone());
                Ok(Step::Done(c))
            }
            Err(BackendError::EmptyCompletion) => {
                Ok(Step::Failed(GenerationFailure::EmptyCompletion))
            }
            Err(e) if e.is_retriable() => Err(halted(sample, e)),
            Err(e) => Ok(Step::Errored(format!("generate: {e}"))),
        }
    }

    fn extract(&self, completion: &Completion) -> Step<ParsedCounterfactual> {
        match extract_tagged(&completion.text, self.config.fallback_enabled()) {
            Ok(p) => Step::Done(p),
            Err(f) => Step::Failed(f.into()),
        }
    }

    fn single_turn(
        &self,
        sample: &Sample,
        prompt: RenderedPrompt,
        record: &mut GenerationRecord,
    ) -> Result<Step<ParsedCounterfactual>, Halt> {
        let messages = [ChatMessage::user(prompt.text.clone())];
        record.prompts.push(prompt);
        Ok(match self.chat(sample, &messages, record)? {
            Step::Done(c) => self.extract(&c),
            Step::Failed(f) => Step::Failed(f),
            Step::Errored(m) => Step::Errored(m),
        })
    }

    fn naive(
        &self,
        sample: &Sample,
        original: &PredictedLabel,
        target: &TargetLabel,
        record: &mut GenerationRecord,
    ) -> Result<Step<ParsedCounterfactual>, Halt> {
        let prompt =
            self.templates
                .render_naive_explanation(sample, original, target, &self.config.task)?;
        self.single_turn(sample, prompt, record)
    }

    fn contrast(
        &self,
        sample: &Sample,
        record: &mut GenerationRecord,
    ) -> Result<Step<ParsedCounterfactual>, Halt> {
        let prompt = self.templates.render_contrast(sample, &self.config.task)?;
        self.single_turn(sample, prompt, record)
    }

    /// Rationale turn, then the rewrite as a follow-up in the same
    /// conversation. A step-1 answer without usable words falls back to
    /// the naive prompt.
    fn guided(
        &self,
        sample: &Sample,
        original: &PredictedLabel,
        target: &TargetLabel,
        record: &mut GenerationRecord,
    ) -> Result<Step<ParsedCounterfactual>, Halt> {
        let step1 = self
            .templates
            .render_guided_step1(sample, original, &self.config.task)?;
        let step1_text = step1.text.clone();
        record.prompts.push(step1);
        let completion =
            match self.chat(sample, &[ChatMessage::user(step1_text.clone())], record)? {
                Step::Done(c) => Some(c),
                Step::Failed(f) => {
                    record.step1_failure = Some(failure_code(f).to_string());
                    None
                }
                Step::Errored(m) => return Ok(Step::Errored(m)),
            };
        let words = completion
            .as_ref()
            .and_then(|c| match parse_word_list(&c.text) {
                Ok(w) => Some(w),
                Err(_) => {
                    record.step1_failure = Some("empty-word-list".into());
                    None
                }
            });
        let (Some(completion), Some(words)) = (completion, words) else {
            record.fallback_naive = true;
            return self.naive(sample, original, target, record);
        };
        let step2 = self
            .templates
            .render_guided_step2(words.words(), original, target)?;
        record.rationale = Some(words);
        let messages = [
            ChatMessage::user(step1_text),
            ChatMessage::assistant(completion.text),
            ChatMessage::user(step2.text.clone()),
        ];
        record.prompts.push(step2);
        Ok(match self.chat(sample, &messages, record)? {
            Step::Done(c) => self.extract(&c),
            Step::Failed(f) => Step::Failed(f),
            Step::Errored(m) => Step::Errored(m),
        })
    }

    fn counterfactual_input(&self, original: &SampleInput, text: &str) -> Option<SampleInput> {
        match original {
            SampleInput::Text { .. } => Some(SampleInput::text(text)),
            SampleInput::Pair { premise, .. } => match self.config.pair_rewrite {
                PairRewrite::WholePair => {
                    parse_flattened_pair(text).map(|(p, h)| SampleInput::pair(p, h))
                }
                PairRewrite::Hypothesis => {
                    let hypothesis = parse_flattened_pair(text)
                        .map(|(_, h)| h)
                        .unwrap_or_else(|| text.to_string());
                    Some(SampleInput::pair(premise.clone(), hypothesis))
                }
            },
        }
    }
}

fn failure_code(f: GenerationFailure) -> &'static str {
    match f {
        GenerationFailure::TagMissing => "tag-missing",
        GenerationFailure::EmptyContent => "empty-content",
        GenerationFailure::EmptyCompletion => "empty-completion",
        GenerationFailure::PairUnparseable => "pair-unparseable",
    }
}

fn errored(mut record: GenerationRecord, message: String) -> GenerationRecord {
    record.status = RecordStatus::Errored;
    record.error = Some(message);
    record.outcome = None;
    record
}

fn halted(sample: &Sample, e: impl fmt::Display) -> CampaignError {
    CampaignError::Halted {
        sample_id: sample.id.clone(),
        reason: e.to_string(),
    }
}

/// Work-stealing pool over `items`. Results reach `sink` on the calling
/// thread in completion order; `sink` returning false stops dispatch.
/// `budget` caps how many items are dispatched at all.
fn run_pool<T, R, F, S>(
    items: &[T],
    workers: usize,
    budget: Option<usize>,
    stop: &AtomicBool,
    work: F,
    mut sink: S,
) where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
    S: FnMut(usize, R) -> bool,
{
    let limit = budget.map_or(items.len(), |b| b.min(items.len()));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(limit.max(1)) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= limit {
                    break;
                }
                if tx.send((idx, work(&items[idx]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (idx, result) in rx {
            if !sink(idx, result) {
                stop.store(true, Ordering::SeqCst);
            }
        }
    });
}

fn file_sha256(path: &Path) -> Result<String, CampaignError> {
    let bytes = std::fs::read(path).map_err(|e| CampaignError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write via a sibling temp file and rename, so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, data: &[u8]) -> Result<(), CampaignError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, data).map_err(|e| CampaignError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CampaignError::io(path, e))
}

/// Group ids by the status recorded in a manifest.
pub fn status_counts(manifest: &RunManifest) -> BTreeMap<SampleStatus, usize> {
    let mut out = BTreeMap::new();
    for status in manifest.samples.values() {
        *out.entry(*status).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests;

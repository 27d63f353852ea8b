//! `fizle` command line: run, resume and report counterfactual campaigns.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

use fizle_core::campaign::{
    load_run_report, render_report, resume_config, run_campaign, CampaignError, CampaignMode,
    PairRewrite, ReportFormat, RunConfig, Services,
};
use fizle_core::domain::TaskSpec;
use fizle_core::llm_backend::BackendSpec;
use fizle_core::metrics::EditUnit;
use fizle_core::prompting::TargetStrategy;
use fizle_core::scripted;

/// Placeholder oracle URLs for scripted runs, which never contact them.
const SCRIPTED_URL: &str = "http://scripted.invalid";

#[derive(Parser)]
#[command(
    name = "fizle",
    version,
    about = "Counterfactual generation and evaluation for black-box text classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a campaign, or continue the one already in --out.
    Run(Box<RunArgs>),
    /// Continue an interrupted campaign from its manifest.
    Resume {
        #[arg(long)]
        manifest: PathBuf,
        /// Config file to take backend credentials from.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the built-in offline generator and oracles.
        #[arg(long)]
        scripted: bool,
    },
    /// Render the reports of one or more finished runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Every run flag. A JSON config file may set any of them under the same
/// snake_case name; flags given on the command line win.
#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Backends selectable with --backend; config file only.
    #[arg(skip)]
    backends: Vec<BackendSpec>,
    /// Task preset (imdb, agnews, snli) or a task JSON file.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// naive, guided or contrast.
    #[arg(long)]
    mode: Option<CampaignMode>,
    /// Backend id from the config file, or the id for --endpoint/--model.
    #[arg(long)]
    backend: Option<String>,
    /// Chat-completions URL for an ad hoc backend.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the ad hoc backend's bearer token.
    #[arg(long)]
    auth_env: Option<String>,
    /// The ad hoc backend rejects `repetition_penalty`.
    #[arg(long)]
    no_repetition_penalty: bool,
    #[arg(long)]
    classifier_url: Option<String>,
    #[arg(long)]
    embedder_url: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// cyclic-next, fixed:LABEL or seeded-random-other.
    #[arg(long)]
    target_strategy: Option<TargetStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
    /// Accept tagless completions whole (default: on for contrast only).
    #[arg(long)]
    fallback: Option<bool>,
    /// Count failed generations as non-flips.
    #[arg(long)]
    strict_lfs: bool,
    /// char or word.
    #[arg(long)]
    edit_unit: Option<EditUnit>,
    /// hypothesis or whole-pair.
    #[arg(long)]
    pair_rewrite: Option<PairRewrite>,
    #[arg(long)]
    truncate_chars: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    repetition_penalty: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Use the built-in offline generator and oracles.
    #[arg(long)]
    scripted: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn read_config_file(path: &Path) -> Result<RunArgs, CliError> {
    let data = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&data).map_err(|e| CliError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

macro_rules! prefer_cli {
    ($cli:ident, $file:ident; $($field:ident),* $(,)?) => {
        $( $cli.$field = $cli.$field.or($file.$field); )*
    };
}

impl RunArgs {
    fn merged(mut self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let file = read_config_file(&path)?;
        prefer_cli!(self, file;
            task, dataset, mode, backend, endpoint, model, auth_env, classifier_url,
            embedder_url, out, cache_dir, target_strategy, seed, limit, fallback, edit_unit,
            pair_rewrite, truncate_chars, workers, max_attempts, templates_dir, temperature,
            top_p, repetition_penalty, max_tokens,
        );
        self.strict_lfs |= file.strict_lfs;
        self.scripted |= file.scripted;
        self.no_repetition_penalty |= file.no_repetition_penalty;
        self.backends = file.backends;
        Ok(self)
    }

    fn backend_spec(&self) -> Result<BackendSpec, CliError> {
        if let (Some(endpoint), Some(model)) = (&self.endpoint, &self.model) {
            let id = self.backend.clone().unwrap_or_else(|| model.clone());
            let mut spec = BackendSpec::new(id, endpoint.clone(), model.clone())
                .map_err(|e| usage(e.to_string()))?;
            spec.auth = self.auth_env.clone();
            spec.supports_repetition_penalty = !self.no_repetition_penalty;
            return Ok(spec);
        }
        if self.scripted && self.backend.is_none() {
            return BackendSpec::new("scripted", SCRIPTED_URL, "scripted-rewriter")
                .map_err(|e| usage(e.to_string()));
        }
        let id = self
            .backend
            .as_deref()
            .ok_or_else(|| usage("--backend is required (or --endpoint with --model)"))?;
        let spec = self
            .backends
            .iter()
            .find(|b| b.backend_id == id)
            .cloned()
            .ok_or_else(|| {
                let known: Vec<&str> = self
                    .backends
                    .iter()
                    .map(|b| b.backend_id.as_str())
                    .collect();
                usage(format!(
                    "unknown backend '{id}' (configured: {})",
                    if known.is_empty() {
                        "none".into()
                    } else {
                        known.join(", ")
                    }
                ))
            })?;
        spec.validate().map_err(|e| usage(e.to_string()))?;
        Ok(spec)
    }

    fn into_config(self) -> Result<RunConfig, CliError> {
        let task = TaskSpec::resolve(
            self.task
                .as_deref()
                .ok_or_else(|| usage("--task is required"))?,
        )
        .map_err(|e| usage(e.to_string()))?;
        let backend = self.backend_spec()?;
        let placeholder = |v: Option<String>, flag: &str| match v {
            Some(v) => Ok(v),
            None if self.scripted => Ok(SCRIPTED_URL.to_string()),
            None => Err(usage(format!("{flag} is required"))),
        };
        let classifier_url = placeholder(self.classifier_url.clone(), "--classifier-url")?;
        let embedder_url = placeholder(self.embedder_url.clone(), "--embedder-url")?;
        let mut config = RunConfig::new(
            task,
            self.dataset.ok_or_else(|| usage("--dataset is required"))?,
            self.mode.ok_or_else(|| usage("--mode is required"))?,
            backend,
            classifier_url,
            embedder_url,
            self.out.ok_or_else(|| usage("--out is required"))?,
        );
        config.cache_dir = self.cache_dir;
        config.templates_dir = self.templates_dir;
        if let Some(s) = self.target_strategy {
            config.target_strategy = s;
        }
        config.seed = self.seed.unwrap_or(0);
        config.limit = self.limit;
        config.fallback = self.fallback;
        config.strict_lfs = self.strict_lfs;
        if let Some(u) = self.edit_unit {
            config.edit_unit = u;
        }
        if let Some(p) = self.pair_rewrite {
            config.pair_rewrite = p;
        }
        if let Some(n) = self.truncate_chars {
            config.truncate_chars = n;
        }
        if let Some(n) = self.workers {
            config.workers = n;
        }
        if let Some(n) = self.max_attempts {
            config.retry.max_attempts = n;
        }
        let s = &mut config.sampling;
        s.temperature = self.temperature.unwrap_or(s.temperature);
        s.top_p = self.top_p.unwrap_or(s.top_p);
        s.repetition_penalty = self.repetition_penalty.unwrap_or(s.repetition_penalty);
        s.max_tokens = self.max_tokens.unwrap_or(s.max_tokens);
        config.validate()?;
        Ok(config)
    }
}

fn services(config: &RunConfig, scripted: bool) -> Result<Services, CampaignError> {
    if scripted {
        scripted::services(config)
    } else {
        Services::http(config)
    }
}

fn execute(config: &RunConfig, scripted: bool) -> Result<(), CliError> {
    let services = services(config, scripted)?;
    let result = run_campaign(config, &services)?;
    tracing::info!(network_calls = services.network_calls(), "done");
    print!("{}", render_report(&[result.report], ReportFormat::Table));
    Ok(())
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let args = args.merged()?;
            let scripted = args.scripted;
            let config = args.into_config()?;
            execute(&config, scripted)
        }
        Command::Resume {
            manifest,
            config,
            scripted,
        } => {
            let backends = match &config {
                Some(path) => read_config_file(path)?.backends,
                None => Vec::new(),
            };
            let run_config = resume_config(&manifest, None)?;
            let auth_from = backends
                .iter()
                .find(|b| b.backend_id == run_config.backend.backend_id);
            let run_config = resume_config(&manifest, auth_from)?;
            execute(&run_config, scripted)
        }
        Command::Report {
            runs,
            format,
            output,
        } => {
            let reports = runs
                .iter()
                .map(|dir| load_run_report(dir))
                .collect::<Result<Vec<_>, _>>()?;
            let text = render_report(&reports, format);
            match output {
                Some(path) => {
                    std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("FIZLE_LOG").unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Campaign(CampaignError::Halted { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

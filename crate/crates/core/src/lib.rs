//! Counterfactual generation and evaluation for black-box text
//! classifiers, driven by chat LLM prompts.
//!
//! A campaign classifies originals, asks a generator for minimally edited
//! rewrites, re-classifies them and reports label flip score, embedding
//! similarity, normalized edit distance and consistency.

pub mod campaign;
pub mod domain;
pub mod llm_backend;
pub mod metrics;
pub mod oracle_clients;
pub mod parsing;
pub mod prompting;
pub mod scripted;

pub use campaign::{
    filter_correctly_predicted, load_run_report, render_report, resume_config, run_campaign,
    run_campaign_with, CampaignError, CampaignMode, CampaignResult, GenerationRecord, PairRewrite,
    ReportFormat, RunConfig, RunLimits, RunManifest, Services,
};
pub use domain::{
    canonicalize_label, load_dataset, InputKind, LabelSet, PredictedLabel, Sample, SampleInput,
    TaskSpec,
};
pub use llm_backend::{BackendSpec, ChatMessage, Completion, LlmClient, SamplingParams};
pub use metrics::{EditUnit, MetricsReport, PairOutcome};
pub use oracle_clients::{ClassifierClient, EmbeddingClient, EmbeddingVector};
pub use parsing::{extract_tagged, parse_word_list, ParsedCounterfactual, RationaleWords};
pub use prompting::{
    select_target_label, GenerationMode, RenderedPrompt, TargetLabel, TargetStrategy,
};

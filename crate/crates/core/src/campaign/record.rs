use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CampaignError, CampaignMode};
use crate::domain::{PredictedLabel, SampleInput};
use crate::llm_backend::{truncate_torn_tail, Completion};
use crate::metrics::PairOutcome;
use crate::parsing::{ExtractionFailure, ParsedCounterfactual, RationaleWords};
use crate::prompting::{GenerationMode, RenderedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordStatus {
    Ok,
    GenerationFailed,
    /// A permanent oracle or backend error for this sample.
    Errored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationFailure {
    TagMissing,
    EmptyContent,
    EmptyCompletion,
    PairUnparseable,
}

impl From<ExtractionFailure> for GenerationFailure {
    fn from(f: ExtractionFailure) -> Self {
        match f {
            ExtractionFailure::TagMissing => GenerationFailure::TagMissing,
            ExtractionFailure::EmptyContent | ExtractionFailure::EmptyWordList => {
                GenerationFailure::EmptyContent
            }
        }
    }
}

/// Full trace of one sample: every prompt sent, every completion received,
/// both classifier verdicts and the per-pair metric terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_id: String,
    pub mode: CampaignMode,
    pub status: RecordStatus,
    pub truncated: bool,
    /// Absent only when classifying the original itself errored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_prediction: Option<PredictedLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label: Option<String>,
    pub prompts: Vec<RenderedPrompt>,
    pub completions: Vec<Completion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<RationaleWords>,
    #[serde(default)]
    pub fallback_naive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step1_failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<ParsedCounterfactual>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_input: Option<SampleInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_prediction: Option<PredictedLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<GenerationFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<PairOutcome>,
}

impl GenerationRecord {
    pub(crate) fn new(
        sample_id: &str,
        mode: CampaignMode,
        original: Option<PredictedLabel>,
    ) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            mode,
            status: RecordStatus::Ok,
            truncated: false,
            original_prediction: original,
            target_label: None,
            prompts: Vec::new(),
            completions: Vec::new(),
            rationale: None,
            fallback_naive: false,
            step1_failure: None,
            counterfactual: None,
            counterfactual_input: None,
            counterfactual_prediction: None,
            failure: None,
            error: None,
            outcome: None,
        }
    }

    pub fn prompt_modes(&self) -> Vec<GenerationMode> {
        self.prompts.iter().map(|p| p.mode).collect()
    }
}

/// Append-only record log, one JSON line per finished sample.
pub(crate) struct RecordLog {
    path: PathBuf,
    file: File,
}

impl RecordLog {
    pub(crate) fn open(path: &Path) -> Result<Self, CampaignError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CampaignError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub(crate) fn append(&mut self, record: &GenerationRecord) -> Result<(), CampaignError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| CampaignError::io(&self.path, e))
    }
}

/// Read a record log, dropping a torn final line.
pub fn read_records(path: &Path) -> Result<BTreeMap<String, GenerationRecord>, CampaignError> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    truncate_torn_tail(path).map_err(|e| CampaignError::io(path, e))?;
    let file = File::open(path).map_err(|e| CampaignError::io(path, e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CampaignError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GenerationRecord = serde_json::from_str(&line).map_err(|e| {
            CampaignError::Corrupt(format!("{} line {}: {e}", path.display(), idx + 1))
        })?;
        out.insert(record.sample_id.clone(), record);
    }
    Ok(out)
}

pub(crate) fn write_records_atomic(
    path: &Path,
    records: &[GenerationRecord],
) -> Result<(), CampaignError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    super::write_atomic(path, &buf)
}

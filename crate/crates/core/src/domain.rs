//! Tasks, label sets, samples and the line-delimited JSON dataset format.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("a label set needs at least 2 classes, got {0}")]
    TooFewLabels(usize),
    #[error("label names must be non-empty")]
    EmptyLabel,
    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),
    #[error("task description must not be empty")]
    EmptyDescription,
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
    #[error("unknown task preset '{0}' (expected imdb, agnews or snli)")]
    UnknownTask(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid task file {path}: {message}")]
    InvalidTaskFile { path: PathBuf, message: String },
    #[error("malformed line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown label '{label}' at line {line}")]
    UnknownLabelAt { label: String, line: usize },
    #[error("duplicate id '{id}' at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),
}

/// Ordered label vocabulary of a k-class problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    /// Label names are unique case-insensitively, since that is how
    /// [`LabelSet::canonicalize`] matches them.
    pub fn new<I, S>(names: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(DomainError::TooFewLabels(names.len()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() || name.trim() != name {
                return Err(DomainError::EmptyLabel);
            }
            if !seen.insert(name.to_lowercase()) {
                return Err(DomainError::DuplicateLabel(name.clone()));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    /// Trimmed, case-insensitive exact match. No fuzzy matching.
    pub fn canonicalize(&self, raw: &str) -> Result<&str, DomainError> {
        let folded = raw.trim().to_lowercase();
        self.names
            .iter()
            .find(|n| n.to_lowercase() == folded)
            .map(String::as_str)
            .ok_or_else(|| DomainError::UnknownLabel(raw.to_string()))
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = DomainError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(labels: LabelSet) -> Self {
        labels.names
    }
}

pub fn canonicalize_label(raw: &str, labels: &LabelSet) -> Result<String, DomainError> {
    labels.canonicalize(raw).map(str::to_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    SingleText,
    TextPair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTaskSpec")]
pub struct TaskSpec {
    pub task_id: String,
    /// Phrase substituted into prompts, e.g. "sentiment classification on IMDB".
    pub description: String,
    pub labels: LabelSet,
    pub input_kind: InputKind,
}

#[derive(Deserialize)]
struct RawTaskSpec {
    task_id: String,
    description: String,
    labels: LabelSet,
    input_kind: InputKind,
}

impl TryFrom<RawTaskSpec> for TaskSpec {
    type Error = DomainError;

    fn try_from(raw: RawTaskSpec) -> Result<Self, Self::Error> {
        TaskSpec::new(raw.task_id, raw.description, raw.labels, raw.input_kind)
    }
}

impl TaskSpec {
    pub fn new(
        task_id: impl Into<String>,
        description: impl Into<String>,
        labels: LabelSet,
        input_kind: InputKind,
    ) -> Result<Self, DomainError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(DomainError::EmptyDescription);
        }
        Ok(Self {
            task_id: task_id.into(),
            description,
            labels,
            input_kind,
        })
    }

    pub fn imdb() -> Self {
        Self::preset_unchecked(
            "imdb",
            "sentiment classification on IMDB",
            &["negative", "positive"],
            InputKind::SingleText,
        )
    }

    pub fn agnews() -> Self {
        Self::preset_unchecked(
            "agnews",
            "news topic classification on AG News",
            &["world", "sports", "business", "sci/tech"],
            InputKind::SingleText,
        )
    }

    pub fn snli() -> Self {
        Self::preset_unchecked(
            "snli",
            "natural language inference on SNLI",
            &["entailment", "neutral", "contradiction"],
            InputKind::TextPair,
        )
    }

    fn preset_unchecked(id: &str, description: &str, labels: &[&str], kind: InputKind) -> Self {
        Self {
            task_id: id.to_string(),
            description: description.to_string(),
            labels: LabelSet::new(labels.iter().copied()).expect("preset labels are valid"),
            input_kind: kind,
        }
    }

    pub fn preset(id: &str) -> Result<Self, DomainError> {
        match id.to_ascii_lowercase().as_str() {
            "imdb" => Ok(Self::imdb()),
            "agnews" | "ag_news" | "ag-news" => Ok(Self::agnews()),
            "snli" => Ok(Self::snli()),
            _ => Err(DomainError::UnknownTask(id.to_string())),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, DomainError> {
        let data = std::fs::read_to_string(path).map_err(|source| DomainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&data).map_err(|e| DomainError::InvalidTaskFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// A preset id, or else a path to a JSON task file.
    pub fn resolve(spec: &str) -> Result<Self, DomainError> {
        match Self::preset(spec) {
            Ok(task) => Ok(task),
            Err(err) => {
                let path = Path::new(spec);
                if path.is_file() {
                    Self::from_json_file(path)
                } else {
                    Err(err)
                }
            }
        }
    }
}

/// Text of one sample. Pairs keep premise and hypothesis apart; consumers
/// flatten them as needed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleInput {
    Text { text: String },
    Pair { premise: String, hypothesis: String },
}

impl SampleInput {
    pub fn text(text: impl Into<String>) -> Self {
        SampleInput::Text { text: text.into() }
    }

    pub fn pair(premise: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        SampleInput::Pair {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
        }
    }

    pub fn kind(&self) -> InputKind {
        match self {
            SampleInput::Text { .. } => InputKind::SingleText,
            SampleInput::Pair { .. } => InputKind::TextPair,
        }
    }

    /// Single string form used in prompts and string metrics.
    pub fn flatten(&self) -> String {
        match self {
            SampleInput::Text { text } => text.clone(),
            SampleInput::Pair {
                premise,
                hypothesis,
            } => format!("premise: {premise}\nhypothesis: {hypothesis}"),
        }
    }

    /// Keep at most `max_chars` characters of each text field. Returns whether
    /// anything was cut.
    pub fn truncated(&self, max_chars: usize) -> (SampleInput, bool) {
        fn cut(s: &str, max: usize) -> (String, bool) {
            match s.char_indices().nth(max) {
                Some((idx, _)) => (s[..idx].to_string(), true),
                None => (s.to_string(), false),
            }
        }
        match self {
            SampleInput::Text { text } => {
                let (text, t) = cut(text, max_chars);
                (SampleInput::Text { text }, t)
            }
            SampleInput::Pair {
                premise,
                hypothesis,
            } => {
                let (premise, a) = cut(premise, max_chars);
                let (hypothesis, b) = cut(hypothesis, max_chars);
                (
                    SampleInput::Pair {
                        premise,
                        hypothesis,
                    },
                    a || b,
                )
            }
        }
    }

    fn fields_non_empty(&self) -> bool {
        match self {
            SampleInput::Text { text } => !text.trim().is_empty(),
            SampleInput::Pair {
                premise,
                hypothesis,
            } => !premise.trim().is_empty() && !hypothesis.trim().is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(flatten)]
    pub input: SampleInput,
    #[serde(rename = "label")]
    pub gold_label: String,
}

impl Sample {
    pub fn flattened(&self) -> String {
        self.input.flatten()
    }
}

/// Classifier verdict. When scores are present they form a distribution
/// whose argmax is `label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedLabel {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl PredictedLabel {
    pub fn new(
        raw_label: &str,
        scores: Option<Vec<f64>>,
        labels: &LabelSet,
    ) -> Result<Self, DomainError> {
        let label = labels.canonicalize(raw_label)?.to_string();
        if let Some(scores) = &scores {
            if scores.len() != labels.k() {
                return Err(DomainError::InvalidPrediction(format!(
                    "expected {} scores, got {}",
                    labels.k(),
                    scores.len()
                )));
            }
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(DomainError::InvalidPrediction("non-finite score".into()));
            }
            let sum: f64 = scores.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(DomainError::InvalidPrediction(format!(
                    "scores sum to {sum}, not 1"
                )));
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let idx = labels
                .index_of(&label)
                .expect("canonical label is a member");
            if scores[idx] < max {
                return Err(DomainError::InvalidPrediction(format!(
                    "label '{label}' is not the argmax of its scores"
                )));
            }
        }
        Ok(Self { label, scores })
    }
}

impl fmt::Display for PredictedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

#[derive(Deserialize)]
struct RawRow {
    id: Option<String>,
    text: Option<String>,
    premise: Option<String>,
    hypothesis: Option<String>,
    label: Option<String>,
}

/// Parse line-delimited JSON rows, validating each against `task`. Blank
/// lines are skipped; line numbers in errors are 1-based.
pub fn parse_dataset<R: BufRead>(reader: R, task: &TaskSpec) -> Result<Vec<Sample>, DomainError> {
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DomainError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| DomainError::Malformed {
            line: line_no,
            message,
        };
        let row: RawRow = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let id = row
            .id
            .ok_or_else(|| malformed("missing field 'id'".into()))?;
        if id.is_empty() {
            return Err(malformed("empty id".into()));
        }
        let raw_label = row
            .label
            .ok_or_else(|| malformed("missing field 'label'".into()))?;
        let input = match (task.input_kind, row.text, row.premise, row.hypothesis) {
            (InputKind::SingleText, Some(text), None, None) => SampleInput::Text { text },
            (InputKind::TextPair, None, Some(premise), Some(hypothesis)) => SampleInput::Pair {
                premise,
                hypothesis,
            },
            (InputKind::SingleText, ..) => {
                return Err(malformed("expected exactly a 'text' field".into()))
            }
            (InputKind::TextPair, ..) => {
                return Err(malformed(
                    "expected 'premise' and 'hypothesis' fields and no 'text'".into(),
                ))
            }
        };
        if !input.fields_non_empty() {
            return Err(malformed("text fields must be non-empty".into()));
        }
        let gold_label = task
            .labels
            .canonicalize(&raw_label)
            .map_err(|_| DomainError::UnknownLabelAt {
                label: raw_label.clone(),
                line: line_no,
            })?
            .to_string();
        if !ids.insert(id.clone()) {
            return Err(DomainError::DuplicateId { id, line: line_no });
        }
        samples.push(Sample {
            id,
            input,
            gold_label,
        });
    }
    Ok(samples)
}

pub fn load_dataset(path: &Path, task: &TaskSpec) -> Result<Vec<Sample>, DomainError> {
    let file = File::open(path).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(BufReader::new(file), task)
}

pub fn write_dataset<W: Write>(samples: &[Sample], mut out: W) -> std::io::Result<()> {
    for sample in samples {
        serde_json::to_writer(&mut out, sample)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

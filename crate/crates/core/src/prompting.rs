//! Prompt templates and counterfactual target-label selection.
//!
//! Templates are plain UTF-8 files with named slots `{task}`, `{y_i}`,
//! `{y_cf}` and `{x_i}`. The built-in set is compiled from `templates/`;
//! a directory with the same file names can replace it at run time.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{LabelSet, PredictedLabel, Sample, TaskSpec};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unresolved slot '{{{0}}}' in template {1}")]
    UnresolvedSlot(String, String),
    #[error("task description must not be empty")]
    EmptyTaskDescription,
    #[error("predicted label and target label are both '{0}'")]
    TargetEqualsSource(String),
    #[error("label '{0}' is not part of the label set")]
    UnknownLabel(String),
    #[error("guided step 2 needs a non-empty word list")]
    EmptyWordList,
    #[error("reading template {path}: {message}")]
    TemplateFile { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    ExplanationNaive,
    ExplanationGuidedStep1,
    ExplanationGuidedStep2,
    ContrastSet,
}

impl GenerationMode {
    pub const ALL: [GenerationMode; 4] = [
        GenerationMode::ExplanationNaive,
        GenerationMode::ExplanationGuidedStep1,
        GenerationMode::ExplanationGuidedStep2,
        GenerationMode::ContrastSet,
    ];

    fn file_stem(self) -> &'static str {
        match self {
            GenerationMode::ExplanationNaive => "naive",
            GenerationMode::ExplanationGuidedStep1 => "guided_step1",
            GenerationMode::ExplanationGuidedStep2 => "guided_step2",
            GenerationMode::ContrastSet => "contrast",
        }
    }
}

/// The label a counterfactual explanation is asked to induce. Never equal
/// to the label it starts from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLabel {
    label: String,
}

impl TargetLabel {
    pub fn new(label: &str, source: &str, labels: &LabelSet) -> Result<Self, PromptError> {
        let label = labels
            .canonicalize(label)
            .map_err(|_| PromptError::UnknownLabel(label.to_string()))?;
        if label == source {
            return Err(PromptError::TargetEqualsSource(label.to_string()));
        }
        Ok(Self {
            label: label.to_string(),
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub mode: GenerationMode,
    pub template_id: String,
    pub text: String,
    /// Slot name to substituted value, kept for audit.
    pub slots: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: String,
    body: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: body.into(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Single pass substitution: values are inserted verbatim and never
    /// re-scanned, so braces inside sample text are left alone.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    let name = &after[..close];
                    let value = slots.get(name).ok_or_else(|| {
                        PromptError::UnresolvedSlot(name.to_string(), self.id.clone())
                    })?;
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    naive: PromptTemplate,
    guided_step1: PromptTemplate,
    guided_step2: PromptTemplate,
    contrast: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            naive: PromptTemplate::new("naive.v1", include_str!("../templates/naive.v1.txt")),
            guided_step1: PromptTemplate::new(
                "guided_step1.v1",
                include_str!("../templates/guided_step1.v1.txt"),
            ),
            guided_step2: PromptTemplate::new(
                "guided_step2.v1",
                include_str!("../templates/guided_step2.v1.txt"),
            ),
            contrast: PromptTemplate::new(
                "contrast.v1",
                include_str!("../templates/contrast.v1.txt"),
            ),
        }
    }

    /// Load `naive.txt`, `guided_step1.txt`, `guided_step2.txt` and
    /// `contrast.txt` from `dir`. Missing files keep the built-in template.
    /// Custom templates are versioned by a content hash.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for mode in GenerationMode::ALL {
            let path = dir.join(format!("{}.txt", mode.file_stem()));
            if !path.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::TemplateFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let body = body.strip_suffix('\n').unwrap_or(&body).to_string();
            let digest = hex::encode(Sha256::digest(body.as_bytes()));
            let id = format!("{}@{}", mode.file_stem(), &digest[..12]);
            *set.template_mut(mode) = PromptTemplate::new(id, body);
        }
        Ok(set)
    }

    pub fn template(&self, mode: GenerationMode) -> &PromptTemplate {
        match mode {
            GenerationMode::ExplanationNaive => &self.naive,
            GenerationMode::ExplanationGuidedStep1 => &self.guided_step1,
            GenerationMode::ExplanationGuidedStep2 => &self.guided_step2,
            GenerationMode::ContrastSet => &self.contrast,
        }
    }

    fn template_mut(&mut self, mode: GenerationMode) -> &mut PromptTemplate {
        match mode {
            GenerationMode::ExplanationNaive => &mut self.naive,
            GenerationMode::ExplanationGuidedStep1 => &mut self.guided_step1,
            GenerationMode::ExplanationGuidedStep2 => &mut self.guided_step2,
            GenerationMode::ContrastSet => &mut self.contrast,
        }
    }

    pub fn versions(&self) -> BTreeMap<GenerationMode, String> {
        GenerationMode::ALL
            .into_iter()
            .map(|m| (m, self.template(m).id().to_string()))
            .collect()
    }

    fn render(
        &self,
        mode: GenerationMode,
        slots: BTreeMap<String, String>,
    ) -> Result<RenderedPrompt, PromptError> {
        let template = self.template(mode);
        let text = template.render(&slots)?;
        Ok(RenderedPrompt {
            mode,
            template_id: template.id().to_string(),
            text,
            slots,
        })
    }

    pub fn render_naive_explanation(
        &self,
        sample: &Sample,
        predicted: &PredictedLabel,
        target: &TargetLabel,
        task: &TaskSpec,
    ) -> Result<RenderedPrompt, PromptError> {
        check_task(task)?;
        if predicted.label == target.label() {
            return Err(PromptError::TargetEqualsSource(predicted.label.clone()));
        }
        self.render(
            GenerationMode::ExplanationNaive,
            slots([
                ("task", task.description.clone()),
                ("y_i", predicted.label.clone()),
                ("y_cf", target.label().to_string()),
                ("x_i", sample.flattened()),
            ]),
        )
    }

    pub fn render_guided_step1(
        &self,
        sample: &Sample,
        predicted: &PredictedLabel,
        task: &TaskSpec,
    ) -> Result<RenderedPrompt, PromptError> {
        check_task(task)?;
        self.render(
            GenerationMode::ExplanationGuidedStep1,
            slots([
                ("task", task.description.clone()),
                ("y_i", predicted.label.clone()),
                ("x_i", sample.flattened()),
            ]),
        )
    }

    /// Sent as a follow-up turn after step 1, so the word list itself is not
    /// repeated in the text; it only has to exist.
    pub fn render_guided_step2(
        &self,
        word_list: &[String],
        predicted: &PredictedLabel,
        target: &TargetLabel,
    ) -> Result<RenderedPrompt, PromptError> {
        if word_list.iter().all(|w| w.trim().is_empty()) {
            return Err(PromptError::EmptyWordList);
        }
        if predicted.label == target.label() {
            return Err(PromptError::TargetEqualsSource(predicted.label.clone()));
        }
        self.render(
            GenerationMode::ExplanationGuidedStep2,
            slots([
                ("y_i", predicted.label.clone()),
                ("y_cf", target.label().to_string()),
            ]),
        )
    }

    pub fn render_contrast(
        &self,
        sample: &Sample,
        task: &TaskSpec,
    ) -> Result<RenderedPrompt, PromptError> {
        check_task(task)?;
        self.render(
            GenerationMode::ContrastSet,
            slots([
                ("task", task.description.clone()),
                ("y_i", sample.gold_label.clone()),
                ("x_i", sample.flattened()),
            ]),
        )
    }
}

fn check_task(task: &TaskSpec) -> Result<(), PromptError> {
    if task.description.trim().is_empty() {
        Err(PromptError::EmptyTaskDescription)
    } else {
        Ok(())
    }
}

fn slots<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn render_naive_explanation(
    sample: &Sample,
    predicted: &PredictedLabel,
    target: &TargetLabel,
    task: &TaskSpec,
) -> Result<RenderedPrompt, PromptError> {
    TemplateSet::builtin().render_naive_explanation(sample, predicted, target, task)
}

pub fn render_guided_step1(
    sample: &Sample,
    predicted: &PredictedLabel,
    task: &TaskSpec,
) -> Result<RenderedPrompt, PromptError> {
    TemplateSet::builtin().render_guided_step1(sample, predicted, task)
}

pub fn render_guided_step2(
    word_list: &[String],
    predicted: &PredictedLabel,
    target: &TargetLabel,
) -> Result<RenderedPrompt, PromptError> {
    TemplateSet::builtin().render_guided_step2(word_list, predicted, target)
}

pub fn render_contrast(sample: &Sample, task: &TaskSpec) -> Result<RenderedPrompt, PromptError> {
    TemplateSet::builtin().render_contrast(sample, task)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TargetStrategy {
    #[default]
    CyclicNext,
    Fixed(String),
    SeededRandomOther,
}

impl fmt::Display for TargetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetStrategy::CyclicNext => f.write_str("cyclic-next"),
            TargetStrategy::Fixed(label) => write!(f, "fixed:{label}"),
            TargetStrategy::SeededRandomOther => f.write_str("seeded-random-other"),
        }
    }
}

impl FromStr for TargetStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cyclic-next" => Ok(TargetStrategy::CyclicNext),
            "seeded-random-other" => Ok(TargetStrategy::SeededRandomOther),
            _ => match s.strip_prefix("fixed:") {
                Some(label) if !label.trim().is_empty() => {
                    Ok(TargetStrategy::Fixed(label.to_string()))
                }
                _ => Err(format!(
                    "unknown target strategy '{s}' (expected cyclic-next, seeded-random-other or fixed:<label>)"
                )),
            },
        }
    }
}

impl Serialize for TargetStrategy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TargetStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Pick the counterfactual target for a sample whose current label is
/// `source`. `seeded-random-other` depends only on `(seed, sample_id)`.
pub fn select_target_label(
    labels: &LabelSet,
    source: &str,
    strategy: &TargetStrategy,
    seed: u64,
    sample_id: &str,
) -> Result<TargetLabel, PromptError> {
    let source_idx = labels
        .index_of(source)
        .ok_or_else(|| PromptError::UnknownLabel(source.to_string()))?;
    let names = labels.names();
    let k = names.len();
    match strategy {
        TargetStrategy::Fixed(label) => TargetLabel::new(label, source, labels),
        TargetStrategy::CyclicNext => {
            TargetLabel::new(&names[(source_idx + 1) % k], source, labels)
        }
        TargetStrategy::SeededRandomOther => {
            let mut hasher = Sha256::new();
            hasher.update(seed.to_le_bytes());
            hasher.update(sample_id.as_bytes());
            let digest = hasher.finalize();
            let mut key = [0u8; 8];
            key.copy_from_slice(&digest[..8]);
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key));
            let pick = rng.gen_range(0..k - 1);
            let idx = if pick >= source_idx { pick + 1 } else { pick };
            TargetLabel::new(&names[idx], source, labels)
        }
    }
}

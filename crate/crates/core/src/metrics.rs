//! Label flip score, semantic similarity, normalized edit distance,
//! consistency and accuracy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::campaign::CampaignMode;
use crate::oracle_clients::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no evaluable records")]
    Empty,
    #[error("normalized edit distance is undefined for two empty strings")]
    BothEmpty,
    #[error("record '{0}' has no counterfactual verdict")]
    NotEvaluable(String),
    #[error("record '{0}' has no contrast gold label")]
    MissingContrastGold(String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditUnit {
    #[default]
    Char,
    Word,
}

impl fmt::Display for EditUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditUnit::Char => "char",
            EditUnit::Word => "word",
        })
    }
}

impl FromStr for EditUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(EditUnit::Char),
            "word" => Ok(EditUnit::Word),
            _ => Err(format!("unknown edit unit '{s}' (expected char or word)")),
        }
    }
}

/// Edit distance over arbitrary token sequences, two-row dynamic program.
pub fn levenshtein_seq<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(x != y);
            cur[j + 1] = substitution.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn units(s: &str, unit: EditUnit) -> Vec<&str> {
    match unit {
        EditUnit::Char => s
            .char_indices()
            .map(|(i, c)| &s[i..i + c.len_utf8()])
            .collect(),
        EditUnit::Word => s.split_whitespace().collect(),
    }
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_seq(&a, &b)
}

pub fn levenshtein_in(a: &str, b: &str, unit: EditUnit) -> usize {
    match unit {
        EditUnit::Char => levenshtein(a, b),
        EditUnit::Word => levenshtein_seq(&units(a, unit), &units(b, unit)),
    }
}

pub fn normalized_edit_distance(a: &str, b: &str) -> Result<f64, MetricsError> {
    normalized_edit_distance_in(a, b, EditUnit::Char)
}

/// `lev(a, b) / max(|a|, |b|)` with lengths counted in `unit`.
pub fn normalized_edit_distance_in(a: &str, b: &str, unit: EditUnit) -> Result<f64, MetricsError> {
    let a = units(a, unit);
    let b = units(b, unit);
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(levenshtein_seq(&a, &b) as f64 / longest as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeStatus {
    Ok,
    GenerationFailed,
}

/// Per-sample evaluation terms. Metric fields are present iff the
/// status is `Ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub sample_id: String,
    pub gold_label: String,
    pub original_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast_gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_distance_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_sim: Option<f64>,
    pub status: OutcomeStatus,
}

impl PairOutcome {
    pub fn evaluated(
        sample_id: impl Into<String>,
        gold_label: impl Into<String>,
        original_label: impl Into<String>,
        counterfactual_label: impl Into<String>,
        edit_distance_norm: f64,
        semantic_sim: f64,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            gold_label: gold_label.into(),
            original_label: original_label.into(),
            counterfactual_label: Some(counterfactual_label.into()),
            contrast_gold: None,
            edit_distance_norm: Some(edit_distance_norm),
            semantic_sim: Some(semantic_sim),
            status: OutcomeStatus::Ok,
        }
    }

    pub fn failed(
        sample_id: impl Into<String>,
        gold_label: impl Into<String>,
        original_label: impl Into<String>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            gold_label: gold_label.into(),
            original_label: original_label.into(),
            counterfactual_label: None,
            contrast_gold: None,
            edit_distance_norm: None,
            semantic_sim: None,
            status: OutcomeStatus::GenerationFailed,
        }
    }

    /// Contrast examples keep the original's ground truth label.
    pub fn with_contrast_gold(mut self) -> Self {
        self.contrast_gold = Some(self.gold_label.clone());
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == OutcomeStatus::Ok
    }

    fn cf_label(&self) -> Result<&str, MetricsError> {
        match (&self.status, &self.counterfactual_label) {
            (OutcomeStatus::Ok, Some(l)) => Ok(l),
            _ => Err(MetricsError::NotEvaluable(self.sample_id.clone())),
        }
    }
}

fn pct(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Percentage of outcomes whose classifier label changed.
pub fn label_flip_score(outcomes: &[PairOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut flips = 0;
    for o in outcomes {
        if o.cf_label()? != o.original_label {
            flips += 1;
        }
    }
    Ok(pct(flips, outcomes.len()))
}

/// Like [`label_flip_score`], but failed generations stay in the
/// denominator and count as non-flips.
pub fn label_flip_score_strict(outcomes: &[PairOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let flips = outcomes
        .iter()
        .filter(|o| matches!(o.cf_label(), Ok(l) if l != o.original_label))
        .count();
    Ok(pct(flips, outcomes.len()))
}

pub fn inner_product(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MetricsError> {
    if a.dimension() != b.dimension() {
        return Err(MetricsError::DimensionMismatch(
            a.dimension(),
            b.dimension(),
        ));
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum())
}

pub fn mean_semantic_similarity(
    pairs: &[(EmbeddingVector, EmbeddingVector)],
) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += inner_product(a, b)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Percentage of pairs where both the original and its contrast example
/// are classified correctly.
pub fn consistency(outcomes: &[PairOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut hits = 0;
    for o in outcomes {
        let contrast_gold = o
            .contrast_gold
            .as_deref()
            .ok_or_else(|| MetricsError::MissingContrastGold(o.sample_id.clone()))?;
        if o.original_label == o.gold_label && o.cf_label()? == contrast_gold {
            hits += 1;
        }
    }
    Ok(pct(hits, outcomes.len()))
}

pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(labels: &[(P, G)]) -> Result<f64, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = labels
        .iter()
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(pct(hits, labels.len()))
}

/// Aggregate report of one campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task_id: String,
    pub backend_id: String,
    pub model_name: String,
    pub variant: CampaignMode,
    pub edit_unit: EditUnit,
    pub strict_lfs: bool,
    /// Samples read from the dataset (after any limit).
    pub n_input: usize,
    /// Samples that entered generation.
    pub n_kept: usize,
    /// Originals the classifier got wrong; explanation mode only.
    pub n_dropped: usize,
    pub n_filter_errored: usize,
    pub n_evaluated: usize,
    pub n_failed: usize,
    pub n_errored: usize,
    pub n_fallback_naive: usize,
    pub failure_rate_pct: f64,
    pub lfs_pct: Option<f64>,
    pub mean_semantic_sim: Option<f64>,
    pub mean_edit_dist: Option<f64>,
    pub original_accuracy_pct: Option<f64>,
    pub contrast_accuracy_pct: Option<f64>,
    pub consistency_pct: Option<f64>,
}

/// Metric values computed from a set of outcomes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutcomeSummary {
    pub n_evaluated: usize,
    pub n_failed: usize,
    pub lfs_pct: Option<f64>,
    pub mean_semantic_sim: Option<f64>,
    pub mean_edit_dist: Option<f64>,
    pub original_accuracy_pct: Option<f64>,
    pub contrast_accuracy_pct: Option<f64>,
    pub consistency_pct: Option<f64>,
}

/// Reduce outcomes in sample-id order so sums do not depend on the order
/// records finished in. Failed generations are left out of every
/// denominator, except the strict LFS variant.
pub fn summarize(
    outcomes: &[PairOutcome],
    contrast: bool,
    strict_lfs: bool,
) -> Result<OutcomeSummary, MetricsError> {
    let mut sorted: Vec<&PairOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let ok: Vec<PairOutcome> = sorted
        .iter()
        .filter(|o| o.is_ok())
        .map(|o| (*o).clone())
        .collect();
    let all: Vec<PairOutcome> = sorted.iter().map(|o| (*o).clone()).collect();
    let mut summary = OutcomeSummary {
        n_evaluated: ok.len(),
        n_failed: all.len() - ok.len(),
        ..Default::default()
    };
    if !contrast && !all.is_empty() && (strict_lfs || !ok.is_empty()) {
        summary.lfs_pct = Some(if strict_lfs {
            label_flip_score_strict(&all)?
        } else {
            label_flip_score(&ok)?
        });
    }
    if ok.is_empty() {
        return Ok(summary);
    }
    let n = ok.len() as f64;
    let mut sim = 0.0;
    let mut dist = 0.0;
    for o in &ok {
        sim += o
            .semantic_sim
            .ok_or_else(|| MetricsError::NotEvaluable(o.sample_id.clone()))?;
        dist += o
            .edit_distance_norm
            .ok_or_else(|| MetricsError::NotEvaluable(o.sample_id.clone()))?;
    }
    summary.mean_semantic_sim = Some(sim / n);
    summary.mean_edit_dist = Some(dist / n);
    if contrast {
        let originals: Vec<(&str, &str)> = ok
            .iter()
            .map(|o| (o.original_label.as_str(), o.gold_label.as_str()))
            .collect();
        let mut contrasts = Vec::with_capacity(ok.len());
        for o in &ok {
            let gold = o
                .contrast_gold
                .as_deref()
                .ok_or_else(|| MetricsError::MissingContrastGold(o.sample_id.clone()))?;
            contrasts.push((o.cf_label()?, gold));
        }
        summary.original_accuracy_pct = Some(accuracy(&originals)?);
        summary.contrast_accuracy_pct = Some(accuracy(&contrasts)?);
        summary.consistency_pct = Some(consistency(&ok)?);
    }
    Ok(summary)
}

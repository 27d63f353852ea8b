use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CampaignError, RunConfig};
use crate::prompting::GenerationMode;

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleStatus {
    Pending,
    Done,
    GenerationFailed,
    Errored,
    /// Misclassified original, excluded from explanation runs.
    Dropped,
    FilterErrored,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub kept: usize,
    pub dropped: usize,
    pub errored: usize,
}

/// Persisted campaign state. The config snapshot never carries backend
/// credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub template_versions: BTreeMap<GenerationMode, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterCounts>,
    pub samples: BTreeMap<String, SampleStatus>,
    pub finalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_hash: Option<String>,
    pub created_at: String,
    pub updated_at: String,
}

/// Config keys that may change between an interrupted run and its resume.
const RESUME_FREE_KEYS: [&str; 4] = ["workers", "retry", "out_dir", "cache_dir"];

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let data = std::fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
        let manifest: RunManifest = serde_json::from_str(&data)
            .map_err(|e| CampaignError::Corrupt(format!("{}: {e}", path.display())))?;
        if manifest.format_version != MANIFEST_FORMAT {
            return Err(CampaignError::Corrupt(format!(
                "{}: unsupported manifest format {}",
                path.display(),
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn save(&mut self, path: &Path) -> Result<(), CampaignError> {
        self.updated_at = chrono::Utc::now().to_rfc3339();
        let mut data = serde_json::to_vec_pretty(self).expect("manifest serializes");
        data.push(b'\n');
        super::write_atomic(path, &data)
    }

    /// Differences that forbid continuing this manifest with `config`,
    /// `dataset_hash` and `templates`. Empty when resuming is safe.
    pub fn resume_conflicts(
        &self,
        config: &RunConfig,
        dataset_hash: &str,
        templates: &BTreeMap<GenerationMode, String>,
    ) -> Vec<String> {
        let mut diffs = Vec::new();
        if self.dataset_hash != dataset_hash {
            diffs.push(format!(
                "dataset content changed (manifest {}, now {})",
                short(&self.dataset_hash),
                short(dataset_hash)
            ));
        }
        for (mode, version) in templates {
            match self.template_versions.get(mode) {
                Some(old) if old == version => {}
                old => diffs.push(format!(
                    "template {mode:?} changed ({} -> {version})",
                    old.map_or("none", String::as_str)
                )),
            }
        }
        let old = config_view(&self.config);
        let new = config_view(config);
        let keys: std::collections::BTreeSet<&String> = old.keys().chain(new.keys()).collect();
        for key in keys {
            if old.get(key) != new.get(key) {
                diffs.push(format!(
                    "config '{key}' changed ({} -> {})",
                    old.get(key).map_or("unset".into(), Value::to_string),
                    new.get(key).map_or("unset".into(), Value::to_string)
                ));
            }
        }
        diffs
    }
}

fn config_view(config: &RunConfig) -> serde_json::Map<String, Value> {
    let mut map = match serde_json::to_value(config).expect("config serializes") {
        Value::Object(map) => map,
        _ => unreachable!("RunConfig serializes to an object"),
    };
    for key in RESUME_FREE_KEYS {
        map.remove(key);
    }
    map
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

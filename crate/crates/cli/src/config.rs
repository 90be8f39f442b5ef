//! Run configurations read from JSON files. Unknown keys are rejected and
//! relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use muse_core::dataset::{ingest, split, Dataset, IngestOptions, SplitPolicy, SyntheticConfig};
use muse_core::embedding_store::{file_checksum, EmbeddingTable, LookupMode, DEFAULT_DIM};
use muse_core::metrics::GroupWeighting;
use muse_core::model::ablation::AblationConfig;
use muse_core::model::{ModelConfig, TrainConfig};
use muse_core::{Mode, MuseError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

fn default_dim() -> usize {
    DEFAULT_DIM
}

/// Where samples and embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Files {
        data: PathBuf,
        embeddings: PathBuf,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        lookup: LookupMode,
    },
    /// Generated in memory; its `seed` is replaced by the run seed.
    Synthetic(SyntheticConfig),
}

pub struct LoadedData {
    pub dataset: Dataset,
    pub table: EmbeddingTable,
    /// Input file checksums, keyed by path.
    pub inputs: Vec<(String, String)>,
}

impl DataSource {
    fn resolve(&mut self, base: &Path) {
        if let DataSource::Files { data, embeddings, .. } = self {
            *data = base.join(&*data);
            *embeddings = base.join(&*embeddings);
        }
    }

    pub fn load(&self, mode: Mode, seed: u64) -> Result<LoadedData> {
        match self {
            DataSource::Files {
                data,
                embeddings,
                dim,
                lookup,
            } => {
                let (dataset, table, manifest) = ingest(
                    data,
                    embeddings,
                    IngestOptions {
                        mode,
                        embedding_dim: *dim,
                        lookup: *lookup,
                    },
                )?;
                let inputs = vec![
                    (data.display().to_string(), manifest.checksums["samples"].clone()),
                    (
                        embeddings.display().to_string(),
                        manifest.checksums["embeddings"].clone(),
                    ),
                ];
                Ok(LoadedData {
                    dataset,
                    table,
                    inputs,
                })
            }
            DataSource::Synthetic(cfg) => {
                let cfg = SyntheticConfig { seed, ..cfg.clone() };
                let data = muse_core::dataset::synthesize(&cfg)?;
                let cap = mode.max_behaviors();
                if let Some(s) = data.dataset.iter().find(|s| s.sequence.len() > cap) {
                    return Err(MuseError::Integrity(format!(
                        "synthetic user {} has {} behaviors, over the {mode:?} cap of {cap}",
                        s.user,
                        s.sequence.len()
                    )));
                }
                Ok(LoadedData {
                    dataset: data.dataset,
                    table: data.table,
                    inputs: Vec::new(),
                })
            }
        }
    }
}

/// Reads a JSON config file as an untyped value.
pub fn read_value(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MuseError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| MuseError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Converts a config value into its typed form, rejecting unknown keys.
pub fn typed<T: DeserializeOwned>(value: serde_json::Value, what: &str) -> Result<T> {
    serde_json::from_value(value).map_err(|e| MuseError::Config(format!("invalid {what} config: {e}")))
}

pub fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn checksum_input(path: &Path) -> Result<(String, String)> {
    Ok((path.display().to_string(), file_checksum(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRun {
    pub data: PathBuf,
    pub embeddings: PathBuf,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub lookup: LookupMode,
    #[serde(default)]
    pub split: Option<SplitPolicy>,
}

impl IngestRun {
    pub fn resolve(&mut self, base: &Path) {
        self.data = base.join(&self.data);
        self.embeddings = base.join(&self.embeddings);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    #[serde(default)]
    pub seed: Option<u64>,
    pub source: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitPolicy,
}

impl TrainRun {
    pub fn resolve(&mut self, base: &Path) {
        self.source.resolve(base);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    /// JSON-lines predictions `{user_id, score, label[, item_id, behavior_len]}`.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub source: Option<DataSource>,
    /// Evaluate only the test part of this split.
    #[serde(default)]
    pub split: Option<SplitPolicy>,
    #[serde(default)]
    pub weighting: GroupWeighting,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl EvalRun {
    pub fn resolve(&mut self, base: &Path) {
        if let Some(p) = &mut self.predictions {
            *p = base.join(&*p);
        }
        if let Some(p) = &mut self.checkpoint {
            *p = base.join(&*p);
        }
        if let Some(s) = &mut self.source {
            s.resolve(base);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRun {
    pub source: DataSource,
    pub user: u64,
    pub target: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_gsu")]
    pub gsu: String,
    /// Needed by strategies that read learned ID embeddings.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_k() -> usize {
    muse_core::gsu::DEFAULT_K
}

fn default_gsu() -> String {
    "muse".into()
}

impl RetrieveRun {
    pub fn resolve(&mut self, base: &Path) {
        self.source.resolve(base);
        if let Some(p) = &mut self.checkpoint {
            *p = base.join(&*p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRun {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Named built-in scenario; ignored when `config` is given.
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub config: Option<muse_core::serving::ScenarioConfig>,
    #[serde(default)]
    pub trace_csv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateRun {
    #[serde(default)]
    pub seed: Option<u64>,
    pub source: DataSource,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl AblateRun {
    pub fn resolve(&mut self, base: &Path) {
        self.source.resolve(base);
    }
}

/// Splits `dataset` and keeps the test part, or everything without a policy.
pub fn test_part(dataset: Dataset, policy: Option<&SplitPolicy>) -> Result<Dataset> {
    match policy {
        Some(p) => Ok(split(&dataset, p)?.1),
        None => Ok(dataset),
    }
}

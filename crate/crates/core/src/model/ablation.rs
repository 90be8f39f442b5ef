//! Training and evaluating a grid of (retrieval strategy × ESU variant)
//! cells on one train/test split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    predict_batch, prepare_retrievals, train, CtrModel, EsuVariant, ModelConfig, Retrieval, TrainConfig,
};
use crate::dataset::{split, Dataset, SplitPolicy};
use crate::embedding_store::EmbeddingTable;
use crate::error::{MuseError, Result};
use crate::gsu::RetrieverRegistry;
use crate::metrics::{auc, gauc_with, GroupWeighting};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub gsu: String,
    pub esu: EsuVariant,
}

impl AblationCell {
    pub fn new(gsu: &str, esu: EsuVariant) -> Self {
        AblationCell { gsu: gsu.into(), esu }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.gsu, self.esu)
    }
}

/// The directional comparison: full model, histogram-only and a
/// recency-retrieval target-attention baseline.
pub fn default_cells() -> Vec<AblationCell> {
    vec![
        AblationCell::new("muse", EsuVariant::SaTaSimTier),
        AblationCell::new("muse", EsuVariant::SimTierOnly),
        AblationCell::new("recent", EsuVariant::TaOnly),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub cells: Vec<AblationCell>,
    /// Shared hyper-parameters; `gsu` and `esu` are overridden per cell.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitPolicy,
    pub weighting: GroupWeighting,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            cells: default_cells(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitPolicy::default(),
            weighting: GroupWeighting::Impressions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub gsu: String,
    pub esu: EsuVariant,
    pub gauc: Option<f64>,
    pub auc: Option<f64>,
    pub train_steps: usize,
    pub head_loss: Option<f64>,
    pub tail_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn gauc(&self, gsu: &str, esu: EsuVariant) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.gsu == gsu && c.esu == esu)
            .and_then(|c| c.gauc)
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:<14} {:>8} {:>8}\n", "gsu", "esu", "gauc", "auc");
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        for c in &self.cells {
            out.push_str(&format!(
                "{:<16} {:<14} {:>8} {:>8}\n",
                c.gsu,
                c.esu.name(),
                fmt(c.gauc),
                fmt(c.auc)
            ));
        }
        out
    }
}

/// Trains every cell from the same initialization seed on the same split.
/// Retrievals of strategies that ignore learned embeddings are computed once
/// and shared between cells.
pub fn run_ablation(
    dataset: &Dataset,
    table: &EmbeddingTable,
    cfg: &AblationConfig,
    registry: &RetrieverRegistry,
    seed: u64,
) -> Result<AblationReport> {
    if cfg.cells.is_empty() {
        return Err(MuseError::Config("ablation needs at least one cell".into()));
    }
    let (train_set, test_set) = split(dataset, &cfg.split)?;
    let mut caches: BTreeMap<String, (Vec<Retrieval>, Vec<Retrieval>)> = BTreeMap::new();
    let mut cells = Vec::with_capacity(cfg.cells.len());
    for cell in &cfg.cells {
        let model_cfg = ModelConfig {
            gsu: cell.gsu.clone(),
            esu: cell.esu,
            ..cfg.model.clone()
        };
        let mut model = CtrModel::new(model_cfg, registry, table, seed)?;
        let static_retrieval = !model.retriever().uses_learned_embeddings();
        if static_retrieval && !caches.contains_key(&cell.gsu) {
            log::info!("retrieving with `{}`", cell.gsu);
            let tr = prepare_retrievals(&model, &train_set.samples, table)?;
            let te = prepare_retrievals(&model, &test_set.samples, table)?;
            caches.insert(cell.gsu.clone(), (tr, te));
        }
        let cache = static_retrieval.then(|| &caches[&cell.gsu]);
        log::info!("training {}", cell.label());
        let log = train(
            &mut model,
            &train_set.samples,
            table,
            &cfg.train,
            cache.map(|c| c.0.as_slice()),
        )?;
        let preds = predict_batch(&model, &test_set.samples, table, cache.map(|c| c.1.as_slice()))?;
        let records = preds.eval_records(&test_set.samples);
        let summary = gauc_with(&records, cfg.weighting);
        cells.push(CellResult {
            gsu: cell.gsu.clone(),
            esu: cell.esu,
            gauc: summary.map(|s| s.gauc),
            auc: auc(&records),
            train_steps: log.steps.len(),
            head_loss: log.head_loss(20),
            tail_loss: log.tail_loss(20),
        });
    }
    Ok(AblationReport {
        seed,
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        cells,
    })
}

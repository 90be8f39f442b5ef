//! Named retrieval strategies.
//!
//! Each strategy implements [`Retriever`] and is registered by name in a
//! [`RetrieverRegistry`]; the model and CLI pick one at runtime from config.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{gsu_retrieve, top_k_select, BehaviorSequence, RetrievedSubsequence};
use crate::dot;
use crate::embedding_store::{EmbeddingTable, LookupMode};
use crate::error::{MuseError, Result};
use crate::ItemId;

/// Source of learned ID embeddings (owned by the model).
pub trait IdVectorSource {
    fn id_vector(&self, id: ItemId) -> Option<&[f64]>;
}

/// Everything a strategy may consult for one (user, target) pair.
pub struct RetrievalRequest<'a> {
    pub target: ItemId,
    pub target_category: Option<u32>,
    pub sequence: &'a BehaviorSequence,
    pub multimodal: &'a EmbeddingTable,
    pub id_vectors: Option<&'a dyn IdVectorSource>,
    pub mode: LookupMode,
}

pub trait Retriever: Send + Sync {
    fn name(&self) -> &'static str;

    /// True when the result depends on trainable parameters, so it cannot be
    /// cached across training steps.
    fn uses_learned_embeddings(&self) -> bool {
        false
    }

    fn retrieve(&self, req: &RetrievalRequest<'_>, k: usize) -> Result<RetrievedSubsequence>;
}

/// Cosine top-K over frozen multimodal embeddings.
#[derive(Debug, Default, Clone, Copy)]
pub struct MultimodalRetriever;

impl Retriever for MultimodalRetriever {
    fn name(&self) -> &'static str {
        "muse"
    }

    fn retrieve(&self, req: &RetrievalRequest<'_>, k: usize) -> Result<RetrievedSubsequence> {
        gsu_retrieve(req.target, req.sequence, req.multimodal, k, req.mode)
    }
}

/// The `k` most recent behaviors in chronological order; scores are zero.
#[derive(Debug, Default, Clone, Copy)]
pub struct RecentRetriever;

impl Retriever for RecentRetriever {
    fn name(&self) -> &'static str {
        "recent"
    }

    fn retrieve(&self, req: &RetrievalRequest<'_>, k: usize) -> Result<RetrievedSubsequence> {
        let len = req.sequence.len();
        let start = len.saturating_sub(k);
        Ok(RetrievedSubsequence {
            indices: (start..len).collect(),
            scores: vec![0.0; len - start],
        })
    }
}

/// The `k` most recent behaviors sharing the target's category, newest first.
#[derive(Debug, Default, Clone, Copy)]
pub struct CategoryRetriever;

impl Retriever for CategoryRetriever {
    fn name(&self) -> &'static str {
        "category"
    }

    fn retrieve(&self, req: &RetrievalRequest<'_>, k: usize) -> Result<RetrievedSubsequence> {
        let categories =
            req.sequence.categories.as_ref().ok_or_else(|| {
                MuseError::Config("category retrieval needs per-behavior categories".into())
            })?;
        let target = req
            .target_category
            .ok_or_else(|| MuseError::Config("category retrieval needs the target category".into()))?;
        let indices: Vec<usize> = categories
            .iter()
            .enumerate()
            .rev()
            .filter(|(_, &c)| c == target)
            .map(|(i, _)| i)
            .take(k)
            .collect();
        let scores = vec![0.0; indices.len()];
        Ok(RetrievedSubsequence { indices, scores })
    }
}

/// Cosine top-K over learned ID embeddings. Unknown ids score zero.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdSimilarityRetriever;

impl Retriever for IdSimilarityRetriever {
    fn name(&self) -> &'static str {
        "id_similarity"
    }

    fn uses_learned_embeddings(&self) -> bool {
        true
    }

    fn retrieve(&self, req: &RetrievalRequest<'_>, k: usize) -> Result<RetrievedSubsequence> {
        let source = req
            .id_vectors
            .ok_or_else(|| MuseError::Config("id_similarity retrieval needs an ID-embedding table".into()))?;
        let norm = |v: &[f64]| dot(v, v).sqrt();
        let scores: Vec<f64> = match source.id_vector(req.target) {
            Some(t) if norm(t) > 0.0 => {
                let tn = norm(t);
                req.sequence
                    .items
                    .iter()
                    .map(|&id| match source.id_vector(id) {
                        Some(v) => {
                            let vn = norm(v);
                            if vn > 0.0 {
                                dot(t, v) / (tn * vn)
                            } else {
                                0.0
                            }
                        }
                        None => 0.0,
                    })
                    .collect()
            }
            _ => vec![0.0; req.sequence.len()],
        };
        Ok(top_k_select(&scores, k))
    }
}

/// Name → strategy map.
#[derive(Clone, Default)]
pub struct RetrieverRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Retriever>>,
}

impl RetrieverRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding `muse`, `recent`, `category` and `id_similarity`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(MultimodalRetriever));
        reg.register(Arc::new(RecentRetriever));
        reg.register(Arc::new(CategoryRetriever));
        reg.register(Arc::new(IdSimilarityRetriever));
        reg
    }

    /// Adds or replaces a strategy under its own name.
    pub fn register(&mut self, retriever: Arc<dyn Retriever>) {
        self.entries.insert(retriever.name(), retriever);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Retriever>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            MuseError::Config(format!(
                "unknown retrieval strategy `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl std::fmt::Debug for RetrieverRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

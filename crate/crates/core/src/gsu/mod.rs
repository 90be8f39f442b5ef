//! General search unit: score a lifelong behavior sequence against a target
//! item and keep the exact top-K.
//!
//! Selection is a total order on `(score, position)`: higher score first, and
//! among equal scores the more recent (larger) position first. Both the heap
//! path and the full-sort path implement exactly this order, so they always
//! agree, and the result for `k` is a prefix of the result for `k + 1`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::embedding_store::{EmbeddingTable, LookupMode};
use crate::error::{MuseError, Result};
use crate::{dot, ItemId, UserId};

mod strategies;

pub use strategies::{
    CategoryRetriever, IdSimilarityRetriever, IdVectorSource, MultimodalRetriever, RecentRetriever,
    RetrievalRequest, Retriever, RetrieverRegistry,
};

/// Default number of retrieved behaviors.
pub const DEFAULT_K: usize = 50;

/// Chronological behavior history of one user (index 0 = oldest).
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSequence {
    pub user: UserId,
    pub items: Arc<[ItemId]>,
    pub categories: Option<Arc<[u32]>>,
}

impl BehaviorSequence {
    pub fn new(user: UserId, items: impl Into<Arc<[ItemId]>>) -> Self {
        BehaviorSequence {
            user,
            items: items.into(),
            categories: None,
        }
    }

    pub fn with_categories(mut self, categories: impl Into<Arc<[u32]>>) -> Result<Self> {
        let categories = categories.into();
        if categories.len() != self.items.len() {
            return Err(MuseError::Shape(format!(
                "{} categories for {} behaviors",
                categories.len(),
                self.items.len()
            )));
        }
        self.categories = Some(categories);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Keeps only the `max_len` most recent behaviors.
    pub fn truncate_recent(&self, max_len: usize) -> BehaviorSequence {
        if self.len() <= max_len {
            return self.clone();
        }
        let start = self.len() - max_len;
        BehaviorSequence {
            user: self.user,
            items: self.items[start..].into(),
            categories: self.categories.as_ref().map(|c| c[start..].into()),
        }
    }
}

/// Per-behavior similarity to the target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilaritySequence(pub Vec<f64>);

impl SimilaritySequence {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Positions into a [`BehaviorSequence`] with their scores, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievedSubsequence {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RetrievedSubsequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Item ids of the retrieved behaviors, in retrieval order.
    pub fn items(&self, seq: &BehaviorSequence) -> Vec<ItemId> {
        self.indices.iter().map(|&i| seq.items[i]).collect()
    }
}

/// `scores[i] = <target, behaviors[i]>`.
pub fn similarity_scores<B: AsRef<[f64]>>(target: &[f64], behaviors: &[B]) -> Result<SimilaritySequence> {
    behaviors
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let b = b.as_ref();
            if b.len() != target.len() {
                return Err(MuseError::Shape(format!(
                    "behavior {i} has dim {}, target has dim {}",
                    b.len(),
                    target.len()
                )));
            }
            Ok(dot(target, b))
        })
        .collect::<Result<Vec<_>>>()
        .map(SimilaritySequence)
}

/// Scores every behavior of `seq` against `target` using `table`.
pub fn score_sequence(
    target: &[f64],
    seq: &[ItemId],
    table: &EmbeddingTable,
    mode: LookupMode,
) -> Result<SimilaritySequence> {
    if target.len() != table.dim() {
        return Err(MuseError::Shape(format!(
            "target has dim {}, table has dim {}",
            target.len(),
            table.dim()
        )));
    }
    seq.iter()
        .map(|&id| table.lookup(id, mode).map(|v| dot(target, v)))
        .collect::<Result<Vec<_>>>()
        .map(SimilaritySequence)
}

#[derive(Clone, Copy, PartialEq)]
struct Ranked {
    score: f64,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn collect_best_first(mut ranked: Vec<Ranked>) -> RetrievedSubsequence {
    ranked.sort_unstable_by(|a, b| b.cmp(a));
    RetrievedSubsequence {
        indices: ranked.iter().map(|r| r.index).collect(),
        scores: ranked.iter().map(|r| r.score).collect(),
    }
}

fn heap_select(scores: &[f64], offset: usize, k: usize) -> Vec<Ranked> {
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for (i, &score) in scores.iter().enumerate() {
        let cand = Ranked {
            score,
            index: offset + i,
        };
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if let Some(mut worst) = heap.peek_mut() {
            if cand > worst.0 {
                *worst = Reverse(cand);
            }
        }
    }
    heap.into_iter().map(|Reverse(r)| r).collect()
}

/// Exact top-`k` by bounded min-heap, O(L log k). `k = 0` selects nothing.
pub fn top_k_select(scores: &[f64], k: usize) -> RetrievedSubsequence {
    if k == 0 {
        return RetrievedSubsequence::default();
    }
    collect_best_first(heap_select(scores, 0, k))
}

/// Exact top-`k` by sorting every position. Reference path for [`top_k_select`].
pub fn top_k_sort(scores: &[f64], k: usize) -> RetrievedSubsequence {
    let ranked: Vec<Ranked> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| Ranked { score, index })
        .collect();
    let mut out = collect_best_first(ranked);
    out.indices.truncate(k);
    out.scores.truncate(k);
    out
}

/// Chunked top-`k` across the rayon pool. Every chunk keeps its own exact
/// top-`k`, so the merged result is identical to [`top_k_select`] for any
/// thread count.
pub fn top_k_select_par(scores: &[f64], k: usize, chunk: usize) -> RetrievedSubsequence {
    if k == 0 {
        return RetrievedSubsequence::default();
    }
    let chunk = chunk.max(k);
    let partial: Vec<Ranked> = scores
        .par_chunks(chunk)
        .enumerate()
        .flat_map_iter(|(c, part)| heap_select(part, c * chunk, k))
        .collect();
    let mut out = collect_best_first(partial);
    out.indices.truncate(k);
    out.scores.truncate(k);
    out
}

/// Multimodal retrieval: embed the target, score every behavior by inner
/// product and keep the exact top-`k`.
pub fn gsu_retrieve(
    target: ItemId,
    seq: &BehaviorSequence,
    table: &EmbeddingTable,
    k: usize,
    mode: LookupMode,
) -> Result<RetrievedSubsequence> {
    if k == 0 {
        return Err(MuseError::Config("k must be at least 1".into()));
    }
    let query = table.lookup(target, mode)?;
    let scores = score_sequence(query, &seq.items, table, mode)?;
    Ok(top_k_select(scores.as_slice(), k))
}

/// [`gsu_retrieve`] with the scan and selection split across the rayon pool.
pub fn gsu_retrieve_par(
    target: ItemId,
    seq: &BehaviorSequence,
    table: &EmbeddingTable,
    k: usize,
    mode: LookupMode,
) -> Result<RetrievedSubsequence> {
    if k == 0 {
        return Err(MuseError::Config("k must be at least 1".into()));
    }
    const CHUNK: usize = 8192;
    let query = table.lookup(target, mode)?;
    let scores = seq
        .items
        .par_iter()
        .with_min_len(CHUNK)
        .map(|&id| table.lookup(id, mode).map(|v| dot(query, v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k_select_par(&scores, k, CHUNK))
}

/// Multimodal similarities of the behaviors at `indices` to `target`.
pub fn multimodal_scores_at(
    target: ItemId,
    seq: &BehaviorSequence,
    indices: &[usize],
    table: &EmbeddingTable,
    mode: LookupMode,
) -> Result<SimilaritySequence> {
    let query = table.lookup(target, mode)?;
    indices
        .iter()
        .map(|&i| table.lookup(seq.items[i], mode).map(|v| dot(query, v)))
        .collect::<Result<Vec<_>>>()
        .map(SimilaritySequence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::normalize_table;
    use proptest::prelude::*;

    #[test]
    fn self_and_orthogonal_similarity() {
        let t = [1.0, 0.0];
        let s = similarity_scores(&t, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        assert!((s.0[0] - 1.0).abs() < 1e-6);
        assert!(s.0[1].abs() < 1e-6);
        assert!((s.0[2] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn similarity_dim_mismatch() {
        assert!(matches!(
            similarity_scores(&[1.0, 0.0], &[vec![1.0]]),
            Err(MuseError::Shape(_))
        ));
    }

    #[test]
    fn top_k_examples() {
        let r = top_k_select(&[0.1, 0.9, 0.5], 2);
        assert_eq!(r.indices, vec![1, 2]);
        assert_eq!(r.scores, vec![0.9, 0.5]);

        let r = top_k_select(&[0.5, 0.5, 0.1], 1);
        assert_eq!(r.indices, vec![1]);

        let r = top_k_select(&[0.3, 0.7, 0.1], 10);
        assert_eq!(r.indices, vec![1, 0, 2]);

        assert!(top_k_select(&[], 5).is_empty());
    }

    #[test]
    fn retrieve_empty_and_self() {
        let table = normalize_table(
            EmbeddingTable::from_rows(
                2,
                [
                    (ItemId(1), vec![1.0, 0.0]),
                    (ItemId(2), vec![0.0, 1.0]),
                    (ItemId(3), vec![1.0, 1.0]),
                ],
            )
            .unwrap(),
        )
        .unwrap();
        let empty = BehaviorSequence::new(UserId(0), Vec::new());
        assert!(gsu_retrieve(ItemId(1), &empty, &table, 50, LookupMode::Strict)
            .unwrap()
            .is_empty());

        let seq = BehaviorSequence::new(UserId(0), vec![ItemId(2), ItemId(3), ItemId(1)]);
        let r = gsu_retrieve(ItemId(1), &seq, &table, 2, LookupMode::Strict).unwrap();
        assert_eq!(r.indices[0], 2);
        assert!((r.scores[0] - 1.0).abs() < 1e-12);

        assert!(matches!(
            gsu_retrieve(ItemId(9), &seq, &table, 2, LookupMode::Strict),
            Err(MuseError::MissingEmbedding(ItemId(9)))
        ));
        assert!(matches!(
            gsu_retrieve(ItemId(1), &seq, &table, 0, LookupMode::Strict),
            Err(MuseError::Config(_))
        ));
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let seq = BehaviorSequence::new(UserId(1), (0..10).map(ItemId).collect::<Vec<_>>())
            .with_categories((0..10).collect::<Vec<u32>>())
            .unwrap();
        let t = seq.truncate_recent(3);
        assert_eq!(&*t.items, &[ItemId(7), ItemId(8), ItemId(9)]);
        assert_eq!(t.categories.as_deref(), Some(&[7u32, 8, 9][..]));
    }

    fn coarse_scores() -> impl Strategy<Value = Vec<f64>> {
        // few distinct values so ties are common
        prop::collection::vec((-4i32..=4).prop_map(|v| v as f64 / 4.0), 0..200)
    }

    proptest! {
        #[test]
        fn heap_matches_sort(scores in coarse_scores(), k in 1usize..60) {
            prop_assert_eq!(top_k_select(&scores, k), top_k_sort(&scores, k));
        }

        #[test]
        fn parallel_matches_serial(scores in coarse_scores(), k in 1usize..40, chunk in 1usize..64) {
            prop_assert_eq!(top_k_select_par(&scores, k, chunk), top_k_select(&scores, k));
        }

        #[test]
        fn k_is_prefix_of_k_plus_one(scores in coarse_scores(), k in 1usize..60) {
            let a = top_k_select(&scores, k);
            let b = top_k_select(&scores, k + 1);
            prop_assert_eq!(&a.indices[..], &b.indices[..a.len()]);
        }

        #[test]
        fn result_invariants(scores in coarse_scores(), k in 1usize..60) {
            let r = top_k_select(&scores, k);
            prop_assert_eq!(r.len(), k.min(scores.len()));
            for w in r.indices.windows(2).zip(r.scores.windows(2)) {
                let (i, s) = w;
                prop_assert!(s[0] >= s[1]);
                if s[0] == s[1] {
                    prop_assert!(i[0] > i[1]);
                }
            }
            let mut seen = r.indices.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), r.len());
        }

        #[test]
        fn permutation_preserves_item_score_multiset(
            scores in coarse_scores(),
            k in 1usize..30,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..scores.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&p| scores[p]).collect();
            let a = top_k_select(&scores, k);
            let b = top_k_select(&permuted, k);
            // same score profile; items may differ only among exact ties
            prop_assert_eq!(&a.scores, &b.scores);
            let cutoff = a.scores.last().copied();
            let strict = |r: &RetrievedSubsequence, map: &dyn Fn(usize) -> usize| {
                let mut v: Vec<usize> = r
                    .indices
                    .iter()
                    .zip(&r.scores)
                    .filter(|(_, s)| Some(**s) != cutoff)
                    .map(|(&i, _)| map(i))
                    .collect();
                v.sort_unstable();
                v
            };
            prop_assert_eq!(strict(&a, &|i| i), strict(&b, &|i| perm[i]));
        }
    }
}

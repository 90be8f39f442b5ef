//! Logical-clock simulation of the deployed pipeline and a retrieval
//! throughput benchmark.
//!
//! Latencies are integer microseconds so totals and differences are exact.
//! In asynchronous mode the behavior/embedding prefetch runs alongside
//! matching, and top-K selection alongside the remaining ranking features:
//!
//! ```text
//! async: max(matching, prefetch) + max(topk, other) + esu
//! sync:  matching + prefetch + topk + other + esu
//! ```
//!
//! A cache hit makes the effective prefetch time zero.

use std::hash::Hash;
use std::num::NonZeroUsize;
use std::sync::Mutex;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::UserId;

mod bench;
mod scenario;

pub use bench::{bench_retrieval, bench_scaling, BenchConfig, BenchReport, ScalingReport};
pub use scenario::{
    run_scenario, write_trace_csv, Distribution, LatencySummary, Scenario, ScenarioConfig, ScenarioRegistry,
    ScenarioReport, StageDistributions, StreamConfig,
};

/// Microseconds on the logical clock.
pub type Micros = u64;

pub fn ms_to_micros(ms: f64) -> Micros {
    (ms.max(0.0) * 1000.0).round() as Micros
}

pub fn micros_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageLatencies {
    pub matching: Micros,
    pub prefetch: Micros,
    pub topk: Micros,
    pub esu: Micros,
    pub other: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Async,
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Matching,
    Prefetch,
    TopK,
    Other,
    Esu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: Stage,
    pub start: Micros,
    pub end: Micros,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub mode: PipelineMode,
    pub cache_hit: bool,
    pub stages: Vec<StageSpan>,
    pub total: Micros,
    /// Extra latency caused by prefetching, relative to a zero-cost fetch.
    pub exposed_prefetch: Micros,
}

impl PipelineTrace {
    pub fn span(&self, stage: Stage) -> Option<StageSpan> {
        self.stages.iter().copied().find(|s| s.stage == stage)
    }
}

/// End-to-end latency under the pipeline algebra.
pub fn pipeline_total(lat: &StageLatencies, mode: PipelineMode, cache_hit: bool) -> Micros {
    let p = if cache_hit { 0 } else { lat.prefetch };
    match mode {
        PipelineMode::Async => lat.matching.max(p) + lat.topk.max(lat.other) + lat.esu,
        PipelineMode::Sync => lat.matching + p + lat.topk + lat.other + lat.esu,
    }
}

/// Stage schedule for one request with a known cache outcome.
pub fn schedule(lat: &StageLatencies, mode: PipelineMode, cache_hit: bool) -> PipelineTrace {
    let p = if cache_hit { 0 } else { lat.prefetch };
    let span = |stage, start: Micros, len: Micros| StageSpan {
        stage,
        start,
        end: start + len,
    };
    let stages = match mode {
        PipelineMode::Async => {
            let rank = lat.matching.max(p);
            let esu = rank + lat.topk.max(lat.other);
            vec![
                span(Stage::Matching, 0, lat.matching),
                span(Stage::Prefetch, 0, p),
                span(Stage::TopK, rank, lat.topk),
                span(Stage::Other, rank, lat.other),
                span(Stage::Esu, esu, lat.esu),
            ]
        }
        PipelineMode::Sync => {
            let mut t = 0;
            [
                (Stage::Matching, lat.matching),
                (Stage::Prefetch, p),
                (Stage::TopK, lat.topk),
                (Stage::Other, lat.other),
                (Stage::Esu, lat.esu),
            ]
            .into_iter()
            .map(|(stage, len)| {
                let s = span(stage, t, len);
                t = s.end;
                s
            })
            .collect()
        }
    };
    let total = pipeline_total(lat, mode, cache_hit);
    let without = pipeline_total(&StageLatencies { prefetch: 0, ..*lat }, mode, cache_hit);
    let trace = PipelineTrace {
        mode,
        cache_hit,
        total,
        exposed_prefetch: total - without,
        stages,
    };
    debug_assert_eq!(trace.stages.iter().map(|s| s.end).max(), Some(trace.total));
    trace
}

/// Simulates one request for `user`, consulting and then updating `cache`.
/// The cache is populated when the prefetch completes on a miss.
pub fn simulate_request<V: Default>(
    lat: &StageLatencies,
    mode: PipelineMode,
    user: UserId,
    cache: &mut EmbeddingCache<UserId, V>,
) -> PipelineTrace {
    let hit = cache.get(&user).is_some();
    if !hit {
        cache.put(user, V::default());
    }
    schedule(lat, mode, hit)
}

/// Bounded LRU cache with hit/miss counters. Capacity 0 never stores.
pub struct EmbeddingCache<K: Hash + Eq, V> {
    inner: Option<LruCache<K, V>>,
    capacity: usize,
    hits: u64,
    misses: u64,
}

impl<K: Hash + Eq, V> EmbeddingCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        EmbeddingCache {
            inner: NonZeroUsize::new(capacity).map(LruCache::new),
            capacity,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.as_ref().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Looks up `key`, refreshing its recency and counting a hit or miss.
    pub fn get(&mut self, key: &K) -> Option<&V> {
        let found = self.inner.as_mut().and_then(|c| c.get(key));
        if found.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        found
    }

    /// Inserts or refreshes `key`, evicting the least recently used entry
    /// when full. Returns the evicted key, if any.
    pub fn put(&mut self, key: K, value: V) -> Option<K> {
        let c = self.inner.as_mut()?;
        match c.push(key, value) {
            Some((k, _)) if !c.contains(&k) => Some(k),
            _ => None,
        }
    }

    pub fn contains(&self, key: &K) -> bool {
        self.inner.as_ref().is_some_and(|c| c.contains(key))
    }

    /// Keys from most to least recently used.
    pub fn keys_by_recency(&self) -> Vec<&K> {
        self.inner
            .as_ref()
            .map_or_else(Vec::new, |c| c.iter().map(|(k, _)| k).collect())
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }
}

/// [`EmbeddingCache`] behind a mutex for concurrent `get`/`put`.
pub struct SharedCache<K: Hash + Eq, V> {
    inner: Mutex<EmbeddingCache<K, V>>,
}

impl<K: Hash + Eq, V: Clone> SharedCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        SharedCache {
            inner: Mutex::new(EmbeddingCache::new(capacity)),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, EmbeddingCache<K, V>> {
        // a panic while holding the lock cannot leave the LRU half-updated
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn get(&self, key: &K) -> Option<V> {
        self.lock().get(key).cloned()
    }

    pub fn put(&self, key: K, value: V) -> Option<K> {
        self.lock().put(key, value)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.lock().hits()
    }

    pub fn misses(&self) -> u64 {
        self.lock().misses()
    }
}

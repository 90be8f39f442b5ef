//! Synthetic datasets with a planted multimodal click signal.
//!
//! Items live in interest clusters: an item embedding is its cluster center
//! plus Gaussian noise of item-specific spread, so some items are
//! prototypical and others peripheral. Every item also carries a hidden
//! `quality` bit that is invisible in the multimodal table.
//!
//! Each user has a few core clusters. History slots draw from them with
//! probability `interest_rate`, otherwise from the whole catalog. With
//! `long_range_signal` the last `recent_window` slots are pure noise, so a
//! recency-based retriever never sees the informative behaviors.
//!
//! Click logit for a (user, target) pair:
//!
//! ```text
//! a + s · (b · max_sim + c · q)
//! ```
//!
//! where `max_sim` is the best multimodal similarity between the target and
//! any behavior, `q` is the mean quality (±1) of the `quality_top` most
//! similar behaviors, `s` is the signal strength, and `a` is solved by
//! bisection so the mean click probability equals `base_ctr`. With `c = 0`
//! the model reduces to `sigmoid(a + s·b·max_sim)`; the quality term is only
//! learnable from behavior ID embeddings.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_samples, Dataset, DatasetManifest, ItemFeatures, Sample, UserFeatures};
use crate::embedding_store::{file_checksum, normalize_table, write_table, EmbeddingTable};
use crate::error::{MuseError, Result};
use crate::gsu::{top_k_select, BehaviorSequence};
use crate::{dot, ItemId, Mode, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub clusters: usize,
    pub categories: u32,
    /// Core clusters per user.
    pub interests_per_user: usize,
    /// In `[0, 1]`; 0 makes labels independent of everything.
    pub signal_strength: f64,
    pub min_sequence: usize,
    pub max_sequence: usize,
    pub samples_per_user: usize,
    pub long_range_signal: bool,
    pub recent_window: usize,
    /// Share of informative history slots drawn from a core cluster.
    pub interest_rate: f64,
    /// Share of targets drawn from a core cluster.
    pub target_interest_rate: f64,
    /// Per-item noise spread is uniform in this range.
    pub spread: (f64, f64),
    pub base_ctr: f64,
    pub similarity_weight: f64,
    pub quality_weight: f64,
    pub quality_top: usize,
    /// Timestamps are days in `0..days`.
    pub days: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            users: 1_000,
            items: 10_000,
            dim: 128,
            clusters: 100,
            categories: 40,
            interests_per_user: 3,
            signal_strength: 0.8,
            min_sequence: 100,
            max_sequence: 1_000,
            samples_per_user: 20,
            long_range_signal: true,
            recent_window: 50,
            interest_rate: 0.1,
            target_interest_rate: 0.3,
            spread: (0.3, 1.5),
            base_ctr: 0.05,
            similarity_weight: 40.0,
            quality_weight: 0.0,
            quality_top: 10,
            days: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MuseError::Config(format!("synthetic config: {m}")));
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must lie in [0, 1]");
        }
        if self.items == 0 || self.dim == 0 || self.clusters == 0 || self.categories == 0 {
            return bad("items, dim, clusters and categories must be positive");
        }
        if self.interests_per_user == 0 || self.interests_per_user > self.clusters {
            return bad("interests_per_user must be in 1..=clusters");
        }
        if self.min_sequence > self.max_sequence {
            return bad("min_sequence exceeds max_sequence");
        }
        if self.max_sequence > Mode::Production.max_behaviors() {
            return bad("max_sequence exceeds the production cap");
        }
        for (name, p) in [
            ("interest_rate", self.interest_rate),
            ("target_interest_rate", self.target_interest_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return bad("base_ctr must lie in (0, 1)");
        }
        let (lo, hi) = self.spread;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad("spread must be an ordered non-negative range");
        }
        if self.days == 0 {
            return bad("days must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub dataset: Dataset,
    /// Embeddings exactly as written to disk (f32-representable, not normalized).
    pub raw_embeddings: EmbeddingTable,
    /// `raw_embeddings` normalized, identical to what ingestion produces.
    pub table: EmbeddingTable,
    /// Best target–behavior similarity per sample.
    pub max_similarity: Vec<f64>,
    /// Noise-free click logit per sample.
    pub logits: Vec<f64>,
    pub intercept: f64,
}

struct Catalog {
    cluster: Vec<usize>,
    quality: Vec<f64>,
    by_cluster: Vec<Vec<usize>>,
    city: Vec<u32>,
}

const CITIES: u32 = 300;
const PROVINCES: u32 = 34;

fn item_id(index: usize) -> ItemId {
    ItemId(index as u64 + 1)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn build_catalog(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<(Catalog, EmbeddingTable)> {
    let centers: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| unit_gaussian(rng, cfg.dim)).collect();
    let mut cluster = Vec::with_capacity(cfg.items);
    let mut quality = Vec::with_capacity(cfg.items);
    let mut city = Vec::with_capacity(cfg.items);
    let mut by_cluster = vec![Vec::new(); cfg.clusters];
    let mut rows = Vec::with_capacity(cfg.items);
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    for i in 0..cfg.items {
        // round-robin keeps every cluster populated
        let c = i % cfg.clusters;
        let spread = rng.random_range(cfg.spread.0..=cfg.spread.1);
        let v: Vec<f64> = centers[c]
            .iter()
            .map(|&x| {
                let noise: f64 = rng.sample(StandardNormal);
                (x + spread * scale * noise) as f32 as f64
            })
            .collect();
        cluster.push(c);
        quality.push(if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        city.push(rng.random_range(0..CITIES));
        by_cluster[c].push(i);
        rows.push((item_id(i), v));
    }
    let raw = EmbeddingTable::from_rows(cfg.dim, rows)?;
    Ok((
        Catalog {
            cluster,
            quality,
            by_cluster,
            city,
        },
        raw,
    ))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intercept `a` with `mean(sigmoid(a + z)) = target`, by bisection.
fn calibrate_intercept(z: &[f64], target: f64) -> f64 {
    if z.is_empty() {
        return (target / (1.0 - target)).ln();
    }
    let mean = |a: f64| z.iter().map(|&v| sigmoid(a + v)).sum::<f64>() / z.len() as f64;
    let (mut lo, mut hi) = (-200.0, 200.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates a dataset and its embedding table. Identical configs give
/// bit-identical outputs.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (catalog, raw) = build_catalog(cfg, &mut rng)?;
    let table = normalize_table(raw.clone())?;
    let category_of = |i: usize| catalog.cluster[i] as u32 % cfg.categories;

    struct Draft {
        sample: Sample,
        z: f64,
        max_sim: f64,
    }
    let mut drafts = Vec::with_capacity(cfg.users * cfg.samples_per_user);
    let mut clusters: Vec<usize> = (0..cfg.clusters).collect();
    let mut scores = Vec::new();
    for u in 0..cfg.users {
        let user = UserId(u as u64 + 1);
        let city = rng.random_range(0..CITIES);
        let features = UserFeatures {
            age: rng.random_range(0..8),
            gender: rng.random_range(0..2),
            city,
            province: city % PROVINCES,
        };
        clusters.partial_shuffle(&mut rng, cfg.interests_per_user);
        let core: Vec<usize> = clusters[..cfg.interests_per_user].to_vec();
        let draw_core = |rng: &mut ChaCha8Rng| {
            let members = &catalog.by_cluster[core[rng.random_range(0..core.len())]];
            members[rng.random_range(0..members.len())]
        };

        let len = rng.random_range(cfg.min_sequence..=cfg.max_sequence);
        let noise_from = if cfg.long_range_signal {
            len.saturating_sub(cfg.recent_window)
        } else {
            len
        };
        let history: Vec<usize> = (0..len)
            .map(|pos| {
                if pos < noise_from && rng.random_bool(cfg.interest_rate) {
                    draw_core(&mut rng)
                } else {
                    rng.random_range(0..cfg.items)
                }
            })
            .collect();
        let items: Arc<[ItemId]> = history.iter().map(|&i| item_id(i)).collect();
        let cats: Arc<[u32]> = history.iter().map(|&i| category_of(i)).collect();
        let sequence = BehaviorSequence::new(user, items).with_categories(cats)?;

        for _ in 0..cfg.samples_per_user {
            let t = if rng.random_bool(cfg.target_interest_rate) {
                draw_core(&mut rng)
            } else {
                rng.random_range(0..cfg.items)
            };
            let query = table.row(t);
            scores.clear();
            scores.extend(history.iter().map(|&b| dot(query, table.row(b))));
            let max_sim = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let max_sim = if scores.is_empty() { 0.0 } else { max_sim };
            let q = if cfg.quality_weight != 0.0 && !scores.is_empty() {
                let top = top_k_select(&scores, cfg.quality_top.max(1));
                top.indices
                    .iter()
                    .map(|&i| catalog.quality[history[i]])
                    .sum::<f64>()
                    / top.indices.len() as f64
            } else {
                0.0
            };
            let z = cfg.signal_strength * (cfg.similarity_weight * max_sim + cfg.quality_weight * q);
            let item_city = catalog.city[t];
            drafts.push(Draft {
                sample: Sample {
                    user,
                    user_features: features,
                    target: ItemFeatures {
                        item: item_id(t),
                        category: category_of(t),
                        city: item_city,
                        province: item_city % PROVINCES,
                    },
                    sequence: sequence.clone(),
                    label: false,
                    ts: Some(rng.random_range(0..cfg.days)),
                },
                z,
                max_sim,
            });
        }
    }

    // interleave users, then order by day
    drafts.shuffle(&mut rng);
    drafts.sort_by_key(|d| d.sample.ts);

    let logits: Vec<f64> = drafts.iter().map(|d| d.z).collect();
    let intercept = calibrate_intercept(&logits, cfg.base_ctr);
    let mut samples = Vec::with_capacity(drafts.len());
    let mut max_similarity = Vec::with_capacity(drafts.len());
    for mut d in drafts {
        d.sample.label = rng.random_bool(sigmoid(intercept + d.z).clamp(0.0, 1.0));
        max_similarity.push(d.max_sim);
        samples.push(d.sample);
    }
    Ok(SyntheticData {
        config: cfg.clone(),
        dataset: Dataset { samples },
        raw_embeddings: raw,
        table,
        max_similarity,
        logits,
        intercept,
    })
}

/// Paths written by [`write_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFiles {
    pub samples: PathBuf,
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
}

/// Writes `samples.jsonl`, `embeddings.bin` (plus sidecar) and
/// `manifest.json` into `dir`.
pub fn write_synthetic(
    data: &SyntheticData,
    dir: impl AsRef<Path>,
) -> Result<(SyntheticFiles, DatasetManifest)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))?;
    let files = SyntheticFiles {
        samples: dir.join("samples.jsonl"),
        embeddings: dir.join("embeddings.bin"),
        manifest: dir.join("manifest.json"),
    };
    write_samples(&data.dataset, &files.samples)?;
    write_table(&data.raw_embeddings, &files.embeddings)?;
    let mode = if data.config.max_sequence > Mode::Academic.max_behaviors() {
        Mode::Production
    } else {
        Mode::Academic
    };
    let mut manifest = data.dataset.manifest(mode, data.config.dim);
    manifest
        .checksums
        .insert("samples".into(), file_checksum(&files.samples)?);
    manifest
        .checksums
        .insert("embeddings".into(), file_checksum(&files.embeddings)?);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&files.manifest, json).map_err(|e| MuseError::io(&files.manifest, e))?;
    Ok((files, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest, IngestOptions};
    use crate::metrics::{gauc, EvalRecord};

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed,
            users: 60,
            items: 2_000,
            dim: 16,
            clusters: 40,
            min_sequence: 60,
            max_sequence: 200,
            samples_per_user: 10,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = synthesize(&small(3)).unwrap();
        let b = synthesize(&small(3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.raw_embeddings, b.raw_embeddings);
        assert_eq!(a.intercept.to_bits(), b.intercept.to_bits());
        let c = synthesize(&small(4)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn unit_norm_embeddings() {
        let d = synthesize(&small(1)).unwrap();
        for (_, v) in d.table.iter() {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn calibrated_base_rate() {
        let d = synthesize(&small(5)).unwrap();
        let mean = d.logits.iter().map(|&z| sigmoid(d.intercept + z)).sum::<f64>() / d.logits.len() as f64;
        assert!((mean - 0.05).abs() < 1e-9);
    }

    #[test]
    fn long_range_keeps_recent_window_noisy() {
        // With every informative slot drawn from a core cluster, the recent
        // window is the only place non-core items can appear.
        let cfg = SyntheticConfig {
            interest_rate: 1.0,
            clusters: 40,
            ..small(2)
        };
        let d = synthesize(&cfg).unwrap();
        let seq = &d.dataset.samples[0].sequence;
        let cats = seq.categories.as_ref().unwrap();
        let early: std::collections::BTreeSet<u32> =
            cats[..seq.len() - cfg.recent_window].iter().copied().collect();
        assert!(early.len() <= cfg.interests_per_user);
        let recent: std::collections::BTreeSet<u32> =
            cats[seq.len() - cfg.recent_window..].iter().copied().collect();
        assert!(recent.len() > cfg.interests_per_user);
    }

    #[test]
    fn round_trip_through_files() {
        let d = synthesize(&small(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (files, manifest) = write_synthetic(&d, dir.path()).unwrap();
        let (ds, table, m2) = ingest(
            &files.samples,
            &files.embeddings,
            IngestOptions {
                embedding_dim: 16,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ds, d.dataset);
        assert_eq!(table, d.table);
        assert_eq!(m2.samples, manifest.samples);
        assert_eq!(m2.users, manifest.users);
        assert_eq!(m2.distinct_items, manifest.distinct_items);
        assert_eq!(m2.checksums, manifest.checksums);
    }

    #[test]
    fn full_signal_oracle_ranks_well() {
        let cfg = SyntheticConfig {
            seed: 0,
            users: 500,
            samples_per_user: 20,
            signal_strength: 1.0,
            ..Default::default()
        };
        let d = synthesize(&cfg).unwrap();
        assert_eq!(d.dataset.len(), 10_000);
        let recs: Vec<EvalRecord> = d
            .dataset
            .iter()
            .zip(&d.max_similarity)
            .map(|(s, &m)| EvalRecord::new(s.user, m, s.label))
            .collect();
        let g = gauc(&recs).unwrap();
        assert!(g > 0.95, "gauc {g}");
    }

    #[test]
    fn timestamps_are_sorted() {
        let d = synthesize(&small(8)).unwrap();
        assert!(d.dataset.samples.windows(2).all(|w| w[0].ts <= w[1].ts));
    }

    #[test]
    fn null_signal_labels_ignore_similarity() {
        let cfg = SyntheticConfig {
            signal_strength: 0.0,
            users: 200,
            base_ctr: 0.3,
            ..small(9)
        };
        let d = synthesize(&cfg).unwrap();
        assert!(d.logits.iter().all(|&z| z == 0.0));
        let recs: Vec<EvalRecord> = d
            .dataset
            .iter()
            .zip(&d.max_similarity)
            .map(|(s, &m)| EvalRecord::new(s.user, m, s.label))
            .collect();
        let g = gauc(&recs).unwrap();
        assert!((g - 0.5).abs() < 0.06, "gauc {g}");
    }
}

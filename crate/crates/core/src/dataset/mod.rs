//! Sample records, JSON-lines IO, ingestion and train/test splitting.
//!
//! One JSON object per line:
//!
//! ```json
//! {"user_id":1,"age":3,"gender":1,"city":20,"province":4,
//!  "item_id":77,"category":5,"item_city":11,"item_province":2,
//!  "behaviors":[5,9,77],"label":1,"ts":6}
//! ```
//!
//! `ts` and `behavior_categories` (one category per behavior) are optional.
//! Unknown fields are rejected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{file_checksum, open_table, EmbeddingTable, LookupMode};
use crate::error::{MuseError, Result};
use crate::gsu::BehaviorSequence;
use crate::{ItemId, Mode, UserId};

pub mod synth;

pub use synth::{synthesize, write_synthetic, SyntheticConfig, SyntheticData, SyntheticFiles};

/// Wire form of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub user_id: u64,
    pub age: u32,
    pub gender: u32,
    pub city: u32,
    pub province: u32,
    pub item_id: u64,
    pub category: u32,
    pub item_city: u32,
    pub item_province: u32,
    pub behaviors: Vec<u64>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_categories: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct UserFeatures {
    pub age: u32,
    pub gender: u32,
    pub city: u32,
    pub province: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ItemFeatures {
    pub item: ItemId,
    pub category: u32,
    pub city: u32,
    pub province: u32,
}

/// In-memory sample. Behavior sequences are shared between samples of the
/// same user when identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user: UserId,
    pub user_features: UserFeatures,
    pub target: ItemFeatures,
    pub sequence: BehaviorSequence,
    pub label: bool,
    pub ts: Option<u64>,
}

impl Sample {
    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            user_id: self.user.0,
            age: self.user_features.age,
            gender: self.user_features.gender,
            city: self.user_features.city,
            province: self.user_features.province,
            item_id: self.target.item.0,
            category: self.target.category,
            item_city: self.target.city,
            item_province: self.target.province,
            behaviors: self.sequence.items.iter().map(|i| i.0).collect(),
            label: self.label as u8,
            ts: self.ts,
            behavior_categories: self.sequence.categories.as_ref().map(|c| c.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    /// Counts and checksums describing this dataset.
    pub fn manifest(&self, mode: Mode, embedding_dim: usize) -> DatasetManifest {
        let users: BTreeSet<UserId> = self.samples.iter().map(|s| s.user).collect();
        let mut items: BTreeSet<ItemId> = BTreeSet::new();
        let mut seen_seq: BTreeSet<usize> = BTreeSet::new();
        for s in &self.samples {
            items.insert(s.target.item);
            if seen_seq.insert(s.sequence.items.as_ptr() as usize) {
                items.extend(s.sequence.items.iter().copied());
            }
        }
        DatasetManifest {
            samples: self.samples.len(),
            users: users.len(),
            distinct_items: items.len(),
            positives: self.samples.iter().filter(|s| s.label).count(),
            max_behavior_length: self.samples.iter().map(|s| s.sequence.len()).max().unwrap_or(0),
            embedding_dim,
            mode,
            embedding_misses: 0,
            split: None,
            checksums: BTreeMap::new(),
        }
    }
}

/// Interns identical consecutive sequences per user.
#[derive(Default)]
pub(crate) struct SequenceInterner {
    last: HashMap<UserId, BehaviorSequence>,
}

impl SequenceInterner {
    pub(crate) fn intern(
        &mut self,
        user: UserId,
        items: Vec<ItemId>,
        categories: Option<Vec<u32>>,
    ) -> Result<BehaviorSequence> {
        if let Some(prev) = self.last.get(&user) {
            let same_cats = match (&prev.categories, &categories) {
                (None, None) => true,
                (Some(a), Some(b)) => a[..] == b[..],
                _ => false,
            };
            if prev.items[..] == items[..] && same_cats {
                return Ok(prev.clone());
            }
        }
        let mut seq = BehaviorSequence::new(user, items);
        if let Some(c) = categories {
            seq = seq.with_categories(c)?;
        }
        self.last.insert(user, seq.clone());
        Ok(seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub policy: SplitPolicy,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: usize,
    pub users: usize,
    pub distinct_items: usize,
    pub positives: usize,
    pub max_behavior_length: usize,
    pub embedding_dim: usize,
    pub mode: Mode,
    pub embedding_misses: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSummary>,
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

/// Streaming reader over a JSON-lines sample file.
pub struct SampleReader<R> {
    lines: std::io::Lines<R>,
    index: usize,
}

impl<R: BufRead> SampleReader<R> {
    pub fn new(reader: R) -> Self {
        SampleReader {
            lines: reader.lines(),
            index: 0,
        }
    }
}

impl SampleReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| MuseError::io(path, e))?;
        Ok(SampleReader::new(BufReader::new(f)))
    }
}

impl<R: BufRead> Iterator for SampleReader<R> {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(MuseError::Record {
                        index: self.index,
                        message: e.to_string(),
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let index = self.index;
            self.index += 1;
            let parsed = serde_json::from_str::<SampleRecord>(&line)
                .map_err(|e| MuseError::Record {
                    index,
                    message: e.to_string(),
                })
                .and_then(|r| {
                    if r.label > 1 {
                        Err(MuseError::Record {
                            index,
                            message: format!("label must be 0 or 1, got {}", r.label),
                        })
                    } else {
                        Ok(r)
                    }
                });
            return Some(parsed);
        }
    }
}

/// Options for [`ingest`].
#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub mode: Mode,
    pub embedding_dim: usize,
    pub lookup: LookupMode,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            mode: Mode::Academic,
            embedding_dim: crate::embedding_store::DEFAULT_DIM,
            lookup: LookupMode::Strict,
        }
    }
}

/// Converts wire records into samples, enforcing the behavior cap and item
/// resolvability. Returns the number of unresolved item references (always 0
/// in strict mode, which errors instead).
pub fn build_dataset<I>(
    records: I,
    table: &EmbeddingTable,
    mode: Mode,
    lookup: LookupMode,
) -> Result<(Dataset, u64)>
where
    I: IntoIterator<Item = Result<SampleRecord>>,
{
    let cap = mode.max_behaviors();
    let mut interner = SequenceInterner::default();
    let mut samples = Vec::new();
    let mut misses = 0u64;
    let mut check = |id: u64| -> Result<()> {
        if !table.contains(ItemId(id)) {
            match lookup {
                LookupMode::Strict => return Err(MuseError::MissingEmbedding(ItemId(id))),
                LookupMode::Permissive => misses += 1,
            }
        }
        Ok(())
    };
    for (index, rec) in records.into_iter().enumerate() {
        let rec = rec?;
        if rec.behaviors.len() > cap {
            return Err(MuseError::Integrity(format!(
                "record {index}: {} behaviors exceed the {:?} cap of {cap}",
                rec.behaviors.len(),
                mode
            )));
        }
        if let Some(c) = &rec.behavior_categories {
            if c.len() != rec.behaviors.len() {
                return Err(MuseError::Record {
                    index,
                    message: format!(
                        "{} behavior categories for {} behaviors",
                        c.len(),
                        rec.behaviors.len()
                    ),
                });
            }
        }
        check(rec.item_id)?;
        for &b in &rec.behaviors {
            check(b)?;
        }
        let user = UserId(rec.user_id);
        let sequence = interner.intern(
            user,
            rec.behaviors.into_iter().map(ItemId).collect(),
            rec.behavior_categories,
        )?;
        samples.push(Sample {
            user,
            user_features: UserFeatures {
                age: rec.age,
                gender: rec.gender,
                city: rec.city,
                province: rec.province,
            },
            target: ItemFeatures {
                item: ItemId(rec.item_id),
                category: rec.category,
                city: rec.item_city,
                province: rec.item_province,
            },
            sequence,
            label: rec.label == 1,
            ts: rec.ts,
        });
    }
    Ok((Dataset { samples }, misses))
}

/// Loads a sample file and its embedding table (normalized).
pub fn ingest(
    data: impl AsRef<Path>,
    embeddings: impl AsRef<Path>,
    opts: IngestOptions,
) -> Result<(Dataset, EmbeddingTable, DatasetManifest)> {
    let (data, embeddings) = (data.as_ref(), embeddings.as_ref());
    let table = open_table(embeddings, opts.embedding_dim)?;
    let (dataset, misses) = build_dataset(SampleReader::open(data)?, &table, opts.mode, opts.lookup)?;
    let mut manifest = dataset.manifest(opts.mode, opts.embedding_dim);
    manifest.embedding_misses = misses;
    manifest.checksums.insert("samples".into(), file_checksum(data)?);
    manifest
        .checksums
        .insert("embeddings".into(), file_checksum(embeddings)?);
    Ok((dataset, table, manifest))
}

pub fn write_samples(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| MuseError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in &dataset.samples {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n").map_err(|e| MuseError::io(path, e))?;
    }
    w.flush().map_err(|e| MuseError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPolicy {
    /// Records with `ts < boundary` train, the rest test.
    ByTime { boundary: u64 },
    /// A seeded shuffle assigns `floor(n · train_fraction)` records to train;
    /// both parts keep their original relative order.
    ByFraction {
        train_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::ByFraction {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

pub fn split(dataset: &Dataset, policy: &SplitPolicy) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    let in_train: Vec<bool> = match *policy {
        SplitPolicy::ByTime { boundary } => dataset
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.ts.map(|t| t < boundary)
                    .ok_or_else(|| MuseError::Config(format!("by_time split: record {i} has no timestamp")))
            })
            .collect::<Result<_>>()?,
        SplitPolicy::ByFraction { train_fraction, seed } => {
            if !(0.0..=1.0).contains(&train_fraction) {
                return Err(MuseError::Config(format!(
                    "train_fraction {train_fraction} outside [0, 1]"
                )));
            }
            let n_train = (n as f64 * train_fraction).floor() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut mark = vec![false; n];
            for &i in &order[..n_train] {
                mark[i] = true;
            }
            mark
        }
    };
    let (mut train, mut test) = (Dataset::default(), Dataset::default());
    for (s, t) in dataset.samples.iter().zip(in_train) {
        if t { &mut train } else { &mut test }.samples.push(s.clone());
    }
    Ok((train, test))
}

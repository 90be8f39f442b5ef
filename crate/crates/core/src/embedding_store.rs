//! Frozen multimodal item embeddings.
//!
//! Tables are loaded from a little-endian binary file:
//!
//! ```text
//! "MUSEEMB1"            8 bytes
//! dim                   u32
//! count                 u64
//! count × { item_id: u64, values: dim × f32 }
//! ```
//!
//! A JSON sidecar (`<file>.json`) records dim, count, normalization status and
//! the SHA-256 of the binary file. Vectors are held in memory as `f64` and are
//! expected to be unit-normalized before retrieval, so the inner product used
//! for scoring is the cosine similarity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MuseError, Result};
use crate::ItemId;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"MUSEEMB1";
pub const DEFAULT_DIM: usize = 128;

const HEADER_LEN: u64 = 8 + 4 + 8;
const NORM_EPS: f64 = 1e-12;

/// How a missing item id is treated by [`EmbeddingTable::lookup`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupMode {
    /// Missing ids are an error. Used for training.
    #[default]
    Strict,
    /// Missing ids yield the zero vector and bump the miss counter. Used for serving.
    Permissive,
}

/// Item id → embedding map with a fixed dimension.
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    data: Vec<f64>,
    normalized: bool,
    zero: Vec<f64>,
    misses: AtomicU64,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        EmbeddingTable {
            dim: self.dim,
            ids: self.ids.clone(),
            index: self.index.clone(),
            data: self.data.clone(),
            normalized: self.normalized,
            zero: self.zero.clone(),
            misses: AtomicU64::new(self.misses.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for EmbeddingTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingTable")
            .field("dim", &self.dim)
            .field("len", &self.ids.len())
            .field("normalized", &self.normalized)
            .finish()
    }
}

/// Tables compare as maps: row order is irrelevant.
impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.normalized == other.normalized
            && self.len() == other.len()
            && self.iter().all(|(id, v)| other.get(id).is_some_and(|w| w == v))
    }
}

impl EmbeddingTable {
    /// Builds a table from `(id, vector)` rows, rejecting wrong lengths,
    /// non-finite entries and duplicate ids.
    pub fn from_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ItemId, Vec<f64>)>,
    {
        if dim == 0 {
            return Err(MuseError::Schema("embedding dimension must be positive".into()));
        }
        let mut table = EmbeddingTable::empty(dim);
        for (id, values) in rows {
            table.push(id, &values)?;
        }
        Ok(table)
    }

    fn empty(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
            normalized: false,
            zero: vec![0.0; dim],
            misses: AtomicU64::new(0),
        }
    }

    fn push(&mut self, id: ItemId, values: &[f64]) -> Result<()> {
        if values.len() != self.dim {
            return Err(MuseError::Schema(format!(
                "item {id}: vector has length {}, table dim is {}",
                values.len(),
                self.dim
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(MuseError::Data(format!(
                "item {id}: non-finite value at component {bad}"
            )));
        }
        if self.index.contains_key(&id) {
            return Err(MuseError::Integrity(format!("duplicate item id {id}")));
        }
        self.index.insert(id, self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.index.contains_key(&id)
    }

    /// Ids in storage order.
    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn get(&self, id: ItemId) -> Option<&[f64]> {
        self.index.get(&id).map(|&row| self.row(row))
    }

    /// Row index of `id` in storage order.
    pub fn row_of(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &[f64])> {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    pub fn lookup(&self, id: ItemId, mode: LookupMode) -> Result<&[f64]> {
        match (self.get(id), mode) {
            (Some(v), _) => Ok(v),
            (None, LookupMode::Strict) => Err(MuseError::MissingEmbedding(id)),
            (None, LookupMode::Permissive) => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                Ok(&self.zero)
            }
        }
    }

    /// Number of permissive lookups that fell back to the zero vector.
    pub fn miss_count(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Content digest independent of row order.
    pub fn checksum(&self) -> String {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_unstable_by_key(|&r| self.ids[r]);
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for r in order {
            hasher.update(self.ids[r].0.to_le_bytes());
            for v in self.row(r) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Divides every vector by its Euclidean norm and sets the normalized flag.
pub fn normalize_table(mut table: EmbeddingTable) -> Result<EmbeddingTable> {
    let dim = table.dim;
    for (row, chunk) in table.data.chunks_exact_mut(dim).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(MuseError::DegenerateEmbedding(table.ids[row]));
        }
        chunk.iter_mut().for_each(|v| *v /= norm);
    }
    table.normalized = true;
    Ok(table)
}

/// Reads a table, verifying the declared dimension. The result is not normalized.
pub fn load_table(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| MuseError::io(path, e))?;
    read_table(BufReader::new(file), dim)
}

/// Loads and normalizes in one step.
pub fn open_table(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingTable> {
    normalize_table(load_table(path, dim)?)
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(MuseError::Parse {
                        offset: start + read as u64,
                        message: format!("unexpected end of file reading {what}"),
                    })
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(MuseError::Parse {
                        offset: start + read as u64,
                        message: e.to_string(),
                    })
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }
}

pub fn read_table<R: Read>(reader: R, dim: usize) -> Result<EmbeddingTable> {
    let mut r = OffsetReader {
        inner: reader,
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.fill(&mut magic, "magic")?;
    if &magic != EMBEDDING_MAGIC {
        return Err(MuseError::Parse {
            offset: 0,
            message: "bad magic, expected MUSEEMB1".into(),
        });
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.fill(&mut b4, "dim")?;
    let file_dim = u32::from_le_bytes(b4) as usize;
    if file_dim != dim {
        return Err(MuseError::Schema(format!(
            "file declares dim {file_dim}, expected {dim}"
        )));
    }
    r.fill(&mut b8, "count")?;
    let count = u64::from_le_bytes(b8);

    let mut table = EmbeddingTable::empty(dim);
    let mut raw = vec![0u8; dim * 4];
    let mut values = vec![0.0f64; dim];
    for _ in 0..count {
        let record_start = r.offset;
        let at_record = |e: MuseError| match e {
            MuseError::Parse { message, .. } => MuseError::Parse {
                offset: record_start,
                message,
            },
            other => other,
        };
        r.fill(&mut b8, "item id").map_err(at_record)?;
        let id = ItemId(u64::from_le_bytes(b8));
        r.fill(&mut raw, "embedding values").map_err(at_record)?;
        for (v, bytes) in values.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(bytes.try_into().expect("chunk of 4")) as f64;
        }
        table.push(id, &values).map_err(|e| match e {
            MuseError::Data(message) => MuseError::Parse {
                offset: record_start,
                message,
            },
            other => other,
        })?;
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(|e| MuseError::Parse {
        offset: r.offset,
        message: e.to_string(),
    })? != 0
    {
        return Err(MuseError::Parse {
            offset: r.offset,
            message: format!("trailing bytes after {count} records"),
        });
    }
    debug_assert_eq!(r.offset, HEADER_LEN + count * (8 + 4 * dim as u64));
    Ok(table)
}

/// Serializes `table` into the binary layout. Values are narrowed to `f32`.
pub fn write_table_to<W: Write>(table: &EmbeddingTable, mut w: W) -> std::io::Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(table.dim as u32).to_le_bytes())?;
    w.write_all(&(table.len() as u64).to_le_bytes())?;
    for (id, values) in table.iter() {
        w.write_all(&id.0.to_le_bytes())?;
        for v in values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

/// Sidecar manifest stored next to an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    pub dim: usize,
    pub count: u64,
    pub normalized: bool,
    pub checksum: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the binary file and its sidecar manifest; returns the manifest.
pub fn write_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<EmbeddingManifest> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| MuseError::io(path, e))?;
    write_table_to(table, BufWriter::new(file)).map_err(|e| MuseError::io(path, e))?;
    let manifest = EmbeddingManifest {
        dim: table.dim,
        count: table.len() as u64,
        normalized: table.normalized,
        checksum: file_checksum(path)?,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&side, json).map_err(|e| MuseError::io(&side, e))?;
    Ok(manifest)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| MuseError::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| MuseError::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

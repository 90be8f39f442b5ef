//! Checkpoint files.
//!
//! ```text
//! b"MUSECKP1"
//! u64 LE  metadata length, then that many bytes of JSON metadata
//! u32 LE  tensor count
//! per tensor:
//!   u32 LE name length, UTF-8 name
//!   u32 LE rank, rank × u64 LE dims
//!   32 bytes SHA-256 of the data bytes
//!   prod(dims) × f32 LE data
//! ```
//!
//! Tensors appear in [`ModelParams::tensors`] order. Values are stored as
//! f32, so a loaded model is the trained one rounded to single precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dense, ModelConfig, ModelParams, TrainConfig, CONTEXT_FIELDS};
use crate::error::{MuseError, Result};
use crate::esu::AttentionParams;
use crate::tensor::Matrix;
use crate::ItemId;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MUSECKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: String,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub steps: u64,
    pub item_vocab: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn write_checkpoint_to<W: Write>(w: &mut W, meta: &CheckpointMeta, params: &ModelParams) -> Result<()> {
    let io = |e| MuseError::io("<checkpoint>", e);
    let json = serde_json::to_vec(meta)?;
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let tensors = params.tensors();
    let shapes = params.shapes();
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for ((name, _, values), shape) in tensors.iter().zip(&shapes) {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let data = f32_bytes(values);
        w.write_all(&Sha256::digest(&data)).map_err(io)?;
        w.write_all(&data).map_err(io)?;
    }
    Ok(())
}

pub fn write_checkpoint(path: impl AsRef<Path>, meta: &CheckpointMeta, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| MuseError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint_to(&mut w, meta, params).map_err(|e| relabel(e, path))?;
    w.flush().map_err(|e| MuseError::io(path, e))
}

fn relabel(e: MuseError, path: &Path) -> MuseError {
    match e {
        MuseError::Io { source, .. } => MuseError::io(path, source),
        other => other,
    }
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| MuseError::Parse {
            offset: self.offset,
            message: format!("checkpoint truncated: {e}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Upper bound on a single allocation driven by header fields.
const MAX_SECTION: u64 = 1 << 34;

pub fn read_checkpoint_from<R: Read>(r: R) -> Result<Checkpoint> {
    let mut c = Cursor { inner: r, offset: 0 };
    if c.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(MuseError::Parse {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let meta_len = c.u64()?;
    if meta_len > MAX_SECTION {
        return Err(MuseError::Parse {
            offset: 8,
            message: format!("metadata length {meta_len} is implausible"),
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&c.bytes(meta_len as usize)?)?;
    meta.config.validate()?;

    let expected = ModelParams::init(&meta.config, Vec::new(), 0)?;
    let mut expected_names: Vec<String> = expected.tensors().into_iter().map(|(n, _, _)| n).collect();
    let mut expected_shapes = expected.shapes();
    expected_shapes[0][0] = meta.item_vocab.len();
    let count = c.u32()? as usize;
    if count != expected_names.len() {
        return Err(MuseError::Shape(format!(
            "checkpoint holds {count} tensors, configuration expects {}",
            expected_names.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (name, shape) in expected_names.drain(..).zip(&expected_shapes) {
        let name_len = c.u32()? as u64;
        if name_len > 4096 {
            return Err(MuseError::Parse {
                offset: c.offset,
                message: "tensor name too long".into(),
            });
        }
        let got = String::from_utf8(c.bytes(name_len as usize)?).map_err(|_| MuseError::Parse {
            offset: c.offset,
            message: "tensor name is not UTF-8".into(),
        })?;
        if got != name {
            return Err(MuseError::Shape(format!(
                "expected tensor `{name}`, found `{got}`"
            )));
        }
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(MuseError::Shape(format!(
                "tensor `{name}` has shape {dims:?}, expected {shape:?}"
            )));
        }
        let digest = c.bytes(32)?;
        let n: usize = dims.iter().product();
        let data = c.bytes(n * 4)?;
        if Sha256::digest(&data)[..] != digest[..] {
            return Err(MuseError::Integrity(format!(
                "checksum mismatch in tensor `{name}`"
            )));
        }
        values.push(
            data.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect::<Vec<f64>>(),
        );
    }
    let mut rest = [0u8; 1];
    if c.inner
        .read(&mut rest)
        .map_err(|e| MuseError::io("<checkpoint>", e))?
        != 0
    {
        return Err(MuseError::Parse {
            offset: c.offset,
            message: "trailing bytes after last tensor".into(),
        });
    }

    let cfg = &meta.config;
    let mut it = values.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    let id_embeddings = Matrix::from_vec(meta.item_vocab.len(), cfg.id_dim, next());
    let context = (0..CONTEXT_FIELDS)
        .map(|_| Matrix::from_vec(cfg.context_buckets, cfg.context_dim, next()))
        .collect();
    let w_q = Matrix::from_vec(cfg.id_dim, cfg.att_dim, next());
    let w_k = Matrix::from_vec(cfg.id_dim, cfg.att_dim, next());
    let w_v = Matrix::from_vec(cfg.id_dim, cfg.out_dim, next());
    let g = next();
    let attention = AttentionParams {
        w_q,
        w_k,
        w_v,
        gamma: [g[0], g[1], g[2]],
    };
    let tower = expected
        .tower
        .iter()
        .map(|d| Dense {
            w: Matrix::from_vec(d.w.rows, d.w.cols, next()),
            b: next(),
        })
        .collect();
    let params = ModelParams::from_parts(meta.item_vocab.clone(), id_embeddings, context, attention, tower);
    Ok(Checkpoint { meta, params })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| MuseError::io(path, e))?;
    read_checkpoint_from(BufReader::new(f)).map_err(|e| relabel(e, path))
}

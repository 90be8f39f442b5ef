//! Two-stage lifelong user-behavior modeling.
//!
//! * [`gsu`] scores a lifelong behavior sequence against a target item with
//!   frozen multimodal embeddings and keeps the exact top-K.
//! * [`esu`] compresses the retrieved similarities into a tier histogram and
//!   runs semantic-aware target attention over ID embeddings.
//! * [`model`] composes both into a CTR predictor with analytic gradients and
//!   a one-epoch Adam trainer.
//! * [`metrics`] computes AUC / GAUC, [`dataset`] ingests and synthesizes
//!   data, and [`serving`] simulates the asynchronous prefetch deployment.

use serde::{Deserialize, Serialize};

pub mod dataset;
pub mod embedding_store;
pub mod error;
pub mod esu;
pub mod gsu;
pub mod metrics;
pub mod model;
pub mod serving;
pub mod tensor;

pub use error::{ErrorKind, MuseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Behavior length caps for the two data regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Open-source dataset regime, at most 1 000 behaviors per user.
    #[default]
    Academic,
    /// Production regime, at most 100 000 behaviors per user.
    Production,
}

impl Mode {
    pub fn max_behaviors(self) -> usize {
        match self {
            Mode::Academic => 1_000,
            Mode::Production => 100_000,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "academic" => Ok(Mode::Academic),
            "production" => Ok(Mode::Production),
            other => Err(MuseError::Config(format!(
                "unknown mode `{other}` (expected academic|production)"
            ))),
        }
    }
}

/// Dense dot product. Four independent accumulators keep the loop vectorizable
/// while the summation order stays fixed.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

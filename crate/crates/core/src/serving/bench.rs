//! Wall-clock throughput of exact top-K retrieval on random unit vectors.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingTable, LookupMode};
use crate::error::{MuseError, Result};
use crate::gsu::{
    gsu_retrieve, gsu_retrieve_par, similarity_scores, top_k_sort, BehaviorSequence, RetrievedSubsequence,
};
use crate::{dot, ItemId, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub dim: usize,
    pub k: usize,
    pub repetitions: usize,
    /// Untimed runs before measuring.
    pub warmup: usize,
    pub seed: u64,
    /// Use the rayon scoring path instead of the single-threaded one.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_len: 100_000,
            dim: 128,
            k: 50,
            repetitions: 10,
            warmup: 1,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub dim: usize,
    pub k: usize,
    pub repetitions: usize,
    pub parallel: bool,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub min_ms: f64,
    pub scans_per_sec: f64,
    /// Embedding bytes read per second (8-byte values).
    pub gb_per_sec: f64,
    pub oracle_passed: bool,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn fixture(cfg: &BenchConfig) -> Result<(EmbeddingTable, BehaviorSequence, ItemId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = (0..=cfg.seq_len as u64).map(|i| (ItemId(i), random_unit(&mut rng, cfg.dim)));
    let table = EmbeddingTable::from_rows(cfg.dim, rows)?;
    let items: Vec<ItemId> = (1..=cfg.seq_len as u64).map(ItemId).collect();
    Ok((table, BehaviorSequence::new(UserId(0), items), ItemId(0)))
}

struct Prepared<'a> {
    cfg: &'a BenchConfig,
    table: EmbeddingTable,
    seq: BehaviorSequence,
    target: ItemId,
}

impl Prepared<'_> {
    fn run(&self) -> Result<RetrievedSubsequence> {
        if self.cfg.parallel {
            gsu_retrieve_par(
                self.target,
                &self.seq,
                &self.table,
                self.cfg.k,
                LookupMode::Strict,
            )
        } else {
            gsu_retrieve(
                self.target,
                &self.seq,
                &self.table,
                self.cfg.k,
                LookupMode::Strict,
            )
        }
    }

    fn time_ms(&self) -> Result<f64> {
        let start = Instant::now();
        std::hint::black_box(self.run()?);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }
}

/// Builds the fixture and checks one retrieval against the full-sort
/// oracle. A mismatch aborts with an invariant error.
fn prepare(cfg: &BenchConfig) -> Result<Prepared<'_>> {
    if cfg.dim == 0 || cfg.k == 0 || cfg.repetitions == 0 {
        return Err(MuseError::Config(
            "dim, k and repetitions must be positive".into(),
        ));
    }
    let (table, seq, target) = fixture(cfg)?;
    let p = Prepared {
        cfg,
        table,
        seq,
        target,
    };
    let got = p.run()?;
    let query = p.table.get(target).expect("fixture target");
    let behaviors: Vec<&[f64]> = p
        .seq
        .items
        .iter()
        .map(|&i| p.table.get(i).expect("fixture item"))
        .collect();
    let oracle = top_k_sort(&similarity_scores(query, &behaviors)?.0, cfg.k);
    if got != oracle {
        return Err(MuseError::Invariant(format!(
            "retrieval disagrees with the sort oracle at seq_len {}",
            cfg.seq_len
        )));
    }
    Ok(p)
}

fn summarize(cfg: &BenchConfig, times: &[f64]) -> BenchReport {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let bytes = (cfg.seq_len + 1) as f64 * cfg.dim as f64 * 8.0;
    let secs = mean / 1e3;
    BenchReport {
        seq_len: cfg.seq_len,
        dim: cfg.dim,
        k: cfg.k,
        repetitions: cfg.repetitions,
        parallel: cfg.parallel,
        mean_ms: mean,
        stddev_ms: var.sqrt(),
        min_ms: min,
        scans_per_sec: if secs > 0.0 { 1.0 / secs } else { f64::INFINITY },
        gb_per_sec: if secs > 0.0 {
            bytes / secs / 1e9
        } else {
            f64::INFINITY
        },
        oracle_passed: true,
    }
}

/// Times `gsu_retrieve` after checking it against the full-sort oracle.
pub fn bench_retrieval(cfg: &BenchConfig) -> Result<BenchReport> {
    let p = prepare(cfg)?;
    for _ in 0..cfg.warmup {
        std::hint::black_box(p.run()?);
    }
    let times = (0..cfg.repetitions)
        .map(|_| p.time_ms())
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cfg, &times))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub base: BenchReport,
    pub doubled: BenchReport,
    /// `doubled.mean_ms / base.mean_ms`.
    pub ratio: f64,
}

/// Benchmarks `seq_len` and `2 · seq_len` with otherwise equal settings.
/// Repetitions alternate between the two lengths, so a scan never starts
/// with its own table left warm in cache by the previous repetition.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<ScalingReport> {
    let doubled_cfg = BenchConfig {
        seq_len: cfg.seq_len * 2,
        ..cfg.clone()
    };
    let small = prepare(cfg)?;
    let large = prepare(&doubled_cfg)?;
    for _ in 0..cfg.warmup {
        std::hint::black_box(small.run()?);
        std::hint::black_box(large.run()?);
    }
    let mut ts = Vec::with_capacity(cfg.repetitions);
    let mut tl = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        ts.push(small.time_ms()?);
        tl.push(large.time_ms()?);
    }
    let base = summarize(cfg, &ts);
    let doubled = summarize(&doubled_cfg, &tl);
    let ratio = doubled.mean_ms / base.mean_ms;
    Ok(ScalingReport { base, doubled, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sequence_is_zero_work() {
        let r = bench_retrieval(&BenchConfig {
            seq_len: 0,
            dim: 8,
            repetitions: 2,
            ..Default::default()
        })
        .unwrap();
        assert!(r.oracle_passed);
        assert_eq!(r.seq_len, 0);
    }

    #[test]
    fn small_run_passes_oracle_both_paths() {
        for parallel in [false, true] {
            let r = bench_retrieval(&BenchConfig {
                seq_len: 5_000,
                dim: 16,
                k: 10,
                repetitions: 2,
                parallel,
                ..Default::default()
            })
            .unwrap();
            assert!(r.oracle_passed && r.mean_ms >= 0.0 && r.stddev_ms >= 0.0);
        }
    }

    #[test]
    fn rejects_zero_k() {
        let cfg = BenchConfig {
            k: 0,
            ..Default::default()
        };
        assert!(matches!(bench_retrieval(&cfg), Err(MuseError::Config(_))));
    }
}

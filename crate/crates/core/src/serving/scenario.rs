//! Request streams, named scenarios and summary reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};

use super::{micros_to_ms, ms_to_micros, schedule, EmbeddingCache, Micros, PipelineMode, StageLatencies};
use crate::error::{MuseError, Result};
use crate::UserId;

/// Per-stage latency distribution, in milliseconds. Draws are rounded to
/// whole microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Constant { ms: f64 },
    Uniform { min_ms: f64, max_ms: f64 },
    LogNormal { median_ms: f64, sigma: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Constant { ms } => ms.is_finite() && ms >= 0.0,
            Distribution::Uniform { min_ms, max_ms } => {
                min_ms.is_finite() && max_ms.is_finite() && 0.0 <= min_ms && min_ms <= max_ms
            }
            Distribution::LogNormal { median_ms, sigma } => {
                median_ms.is_finite() && median_ms > 0.0 && sigma.is_finite() && sigma >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(MuseError::Config(format!(
                "invalid latency distribution {self:?}"
            )))
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Micros {
        let ms = match *self {
            Distribution::Constant { ms } => ms,
            Distribution::Uniform { min_ms, max_ms } => {
                if min_ms == max_ms {
                    min_ms
                } else {
                    rng.random_range(min_ms..=max_ms)
                }
            }
            Distribution::LogNormal { median_ms, sigma } => {
                let d = LogNormal::new(median_ms.ln(), sigma).expect("validated");
                d.sample(rng)
            }
        };
        ms_to_micros(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDistributions {
    pub matching: Distribution,
    pub prefetch: Distribution,
    pub topk: Distribution,
    pub esu: Distribution,
    pub other: Distribution,
}

impl StageDistributions {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> StageLatencies {
        StageLatencies {
            matching: self.matching.sample(rng),
            prefetch: self.prefetch.sample(rng),
            topk: self.topk.sample(rng),
            esu: self.esu.sample(rng),
            other: self.other.sample(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        for d in [&self.matching, &self.prefetch, &self.topk, &self.esu, &self.other] {
            d.validate()?;
        }
        Ok(())
    }
}

/// Which users issue requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub requests: usize,
    pub users: u64,
    /// Zipf exponent over user ranks; 0 is uniform.
    pub zipf_exponent: f64,
    /// Consecutive requests issued by the same user.
    pub burst_length: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            requests: 10_000,
            users: 1_000,
            zipf_exponent: 0.0,
            burst_length: 1,
        }
    }
}

impl StreamConfig {
    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.burst_length == 0 {
            return Err(MuseError::Config(
                "stream needs at least one user and burst_length ≥ 1".into(),
            ));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(MuseError::Config("zipf_exponent must be non-negative".into()));
        }
        Ok(())
    }

    /// Deterministic user sequence for `seed`.
    pub fn users(&self, rng: &mut ChaCha8Rng) -> Vec<UserId> {
        let cdf: Vec<f64> = {
            let w: Vec<f64> = (1..=self.users)
                .map(|r| (r as f64).powf(-self.zipf_exponent))
                .collect();
            let total: f64 = w.iter().sum();
            w.iter()
                .scan(0.0, |acc, x| {
                    *acc += x / total;
                    Some(*acc)
                })
                .collect()
        };
        let mut out = Vec::with_capacity(self.requests);
        while out.len() < self.requests {
            let u: f64 = rng.random();
            let rank = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            let user = UserId(rank as u64 + 1);
            for _ in 0..self.burst_length.min(self.requests - out.len()) {
                out.push(user);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub stages: StageDistributions,
    pub cache_capacity: usize,
    #[serde(default)]
    pub stream: StreamConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.stream.validate()
    }
}

/// A named, documented default scenario.
pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn config(&self) -> ScenarioConfig;
}

fn uniform(min_ms: f64, max_ms: f64) -> Distribution {
    Distribution::Uniform { min_ms, max_ms }
}

struct FastFetch;
struct SlowFetch;
struct Bursty;

impl Scenario for FastFetch {
    fn name(&self) -> &'static str {
        "fast-fetch"
    }
    fn description(&self) -> &'static str {
        "prefetch always shorter than matching"
    }
    fn config(&self) -> ScenarioConfig {
        ScenarioConfig {
            name: self.name().into(),
            stages: StageDistributions {
                matching: uniform(25.0, 40.0),
                prefetch: uniform(5.0, 20.0),
                topk: uniform(1.0, 3.0),
                esu: uniform(30.0, 45.0),
                other: uniform(4.0, 8.0),
            },
            cache_capacity: 1_000,
            stream: StreamConfig::default(),
        }
    }
}

impl Scenario for SlowFetch {
    fn name(&self) -> &'static str {
        "slow-fetch"
    }
    fn description(&self) -> &'static str {
        "heavy-tailed prefetch that often outlasts matching"
    }
    fn config(&self) -> ScenarioConfig {
        ScenarioConfig {
            name: self.name().into(),
            stages: StageDistributions {
                matching: uniform(25.0, 40.0),
                prefetch: Distribution::LogNormal {
                    median_ms: 30.0,
                    sigma: 0.6,
                },
                topk: uniform(1.0, 3.0),
                esu: uniform(30.0, 45.0),
                other: uniform(4.0, 8.0),
            },
            cache_capacity: 1_000,
            stream: StreamConfig::default(),
        }
    }
}

impl Scenario for Bursty {
    fn name(&self) -> &'static str {
        "bursty"
    }
    fn description(&self) -> &'static str {
        "skewed users issuing request bursts, small cache"
    }
    fn config(&self) -> ScenarioConfig {
        ScenarioConfig {
            name: self.name().into(),
            stages: StageDistributions {
                matching: uniform(25.0, 40.0),
                prefetch: Distribution::LogNormal {
                    median_ms: 25.0,
                    sigma: 0.8,
                },
                topk: uniform(1.0, 3.0),
                esu: uniform(30.0, 45.0),
                other: uniform(4.0, 8.0),
            },
            cache_capacity: 200,
            stream: StreamConfig {
                requests: 10_000,
                users: 5_000,
                zipf_exponent: 1.1,
                burst_length: 4,
            },
        }
    }
}

#[derive(Default)]
pub struct ScenarioRegistry {
    scenarios: BTreeMap<&'static str, Arc<dyn Scenario>>,
}

impl ScenarioRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(FastFetch));
        r.register(Arc::new(SlowFetch));
        r.register(Arc::new(Bursty));
        r
    }

    pub fn register(&mut self, s: Arc<dyn Scenario>) {
        self.scenarios.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Scenario>> {
        self.scenarios.get(name).cloned().ok_or_else(|| {
            MuseError::Config(format!(
                "unknown scenario `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.scenarios.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[Micros], q: f64) -> Micros {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl LatencySummary {
    pub fn from_micros(values: &[Micros]) -> Self {
        let mut v = values.to_vec();
        v.sort_unstable();
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        LatencySummary {
            mean_ms: if v.is_empty() {
                0.0
            } else {
                sum as f64 / v.len() as f64 / 1000.0
            },
            p50_ms: micros_to_ms(percentile(&v, 0.50)),
            p95_ms: micros_to_ms(percentile(&v, 0.95)),
            p99_ms: micros_to_ms(percentile(&v, 0.99)),
            max_ms: micros_to_ms(v.last().copied().unwrap_or(0)),
        }
    }
}

/// One simulated request under both modes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request: usize,
    pub user: UserId,
    pub latencies: StageLatencies,
    pub cache_hit: bool,
    pub async_total: Micros,
    pub sync_total: Micros,
    pub exposed_prefetch: Micros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub requests: usize,
    pub cache_capacity: usize,
    pub cache_hit_rate: f64,
    #[serde(rename = "async")]
    pub async_latency: LatencySummary,
    #[serde(rename = "sync")]
    pub sync_latency: LatencySummary,
    pub mean_exposed_prefetch_ms: f64,
    /// Share of requests whose prefetch added any latency in async mode.
    pub exposed_fraction: f64,
    #[serde(skip)]
    pub trace: Vec<RequestRecord>,
}

/// Simulates the request stream once; both modes see the same draws and
/// cache outcomes.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<ScenarioReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = cfg.stream.users(&mut rng);
    let mut cache: EmbeddingCache<UserId, ()> = EmbeddingCache::new(cfg.cache_capacity);
    let mut trace = Vec::with_capacity(users.len());
    for (request, &user) in users.iter().enumerate() {
        let lat = cfg.stages.sample(&mut rng);
        let a = super::simulate_request(&lat, PipelineMode::Async, user, &mut cache);
        let s = schedule(&lat, PipelineMode::Sync, a.cache_hit);
        trace.push(RequestRecord {
            request,
            user,
            latencies: lat,
            cache_hit: a.cache_hit,
            async_total: a.total,
            sync_total: s.total,
            exposed_prefetch: a.exposed_prefetch,
        });
    }
    let n = trace.len();
    let asyncs: Vec<Micros> = trace.iter().map(|r| r.async_total).collect();
    let syncs: Vec<Micros> = trace.iter().map(|r| r.sync_total).collect();
    let exposed: u128 = trace.iter().map(|r| r.exposed_prefetch as u128).sum();
    let exposed_count = trace.iter().filter(|r| r.exposed_prefetch > 0).count();
    let frac = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(ScenarioReport {
        scenario: cfg.name.clone(),
        seed,
        requests: n,
        cache_capacity: cfg.cache_capacity,
        cache_hit_rate: cache.hit_rate(),
        async_latency: LatencySummary::from_micros(&asyncs),
        sync_latency: LatencySummary::from_micros(&syncs),
        mean_exposed_prefetch_ms: frac(exposed as f64) / 1000.0,
        exposed_fraction: frac(exposed_count as f64),
        trace,
    })
}

/// Writes the per-request trace as CSV (microseconds).
pub fn write_trace_csv(report: &ScenarioReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| MuseError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(
        w,
        "request,user,cache_hit,matching_us,prefetch_us,topk_us,other_us,esu_us,async_total_us,sync_total_us,exposed_prefetch_us"
    )
    .map_err(io)?;
    for r in &report.trace {
        let l = &r.latencies;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.request,
            r.user,
            r.cache_hit as u8,
            l.matching,
            l.prefetch,
            l.topk,
            l.other,
            l.esu,
            r.async_total,
            r.sync_total,
            r.exposed_prefetch
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

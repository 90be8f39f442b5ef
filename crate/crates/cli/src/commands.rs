use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use muse_core::dataset::{split, write_synthetic, SplitSummary, SyntheticConfig};
use muse_core::embedding_store::LookupMode;
use muse_core::gsu::{BehaviorSequence, IdVectorSource, RetrievalRequest, RetrieverRegistry};
use muse_core::metrics::{evaluate, EvalRecord, EvaluationReport};
use muse_core::model::ablation::run_ablation;
use muse_core::model::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use muse_core::model::{predict_batch, prepare_retrievals, train, CtrModel};
use muse_core::serving::{
    bench_retrieval, bench_scaling, run_scenario, write_trace_csv, BenchConfig, ScenarioRegistry,
};
use muse_core::{ItemId, Mode, MuseError, Result, UserId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{
    checksum_input, config_dir, read_value, test_part, typed, AblateRun, DataSource, EvalRun, IngestRun,
    RetrieveRun, SimulateRun, TrainRun,
};
use crate::manifest::Run;
use crate::{Cli, Command, DataArgs};

/// Config value (or `{}`) and the directory relative paths resolve against.
fn load_config(cli: &Cli) -> Result<(Value, PathBuf)> {
    match &cli.config {
        Some(p) => Ok((read_value(p)?, config_dir(p))),
        None => Ok((json!({}), PathBuf::new())),
    }
}

fn set<T: Serialize>(value: &mut Value, key: &str, v: Option<T>) -> Result<()> {
    if let Some(v) = v {
        let obj = value
            .as_object_mut()
            .ok_or_else(|| MuseError::Config("config must be a JSON object".into()))?;
        obj.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

/// The run seed: flag first, then the config's `seed` key.
fn seed_of(cli: &Cli, value: &Value) -> Result<Option<u64>> {
    if cli.seed.is_some() {
        return Ok(cli.seed);
    }
    match value.get("seed") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| MuseError::Config("seed must be a non-negative integer".into())),
    }
}

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64> {
    seed.ok_or_else(|| MuseError::Config(format!("`{command}` needs a seed (--seed or config `seed`)")))
}

fn files_source(args: &DataArgs) -> Option<DataSource> {
    match (&args.data, &args.embeddings) {
        (Some(data), Some(embeddings)) => Some(DataSource::Files {
            data: data.clone(),
            embeddings: embeddings.clone(),
            dim: args.dim.unwrap_or(muse_core::embedding_store::DEFAULT_DIM),
            lookup: if args.permissive {
                LookupMode::Permissive
            } else {
                LookupMode::Strict
            },
        }),
        _ => None,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mode = cli.mode.unwrap_or_default();
    match &cli.command {
        Command::Ingest(args) => ingest(&cli, args, mode),
        Command::Synthesize {
            users,
            signal_strength,
        } => synthesize(&cli, *users, *signal_strength, mode),
        Command::Train => train_cmd(&cli, mode),
        Command::Eval {
            predictions,
            checkpoint,
        } => eval(&cli, predictions.clone(), checkpoint.clone(), mode),
        Command::Retrieve {
            data,
            user,
            target,
            k,
            gsu,
            checkpoint,
        } => retrieve(
            &cli,
            data,
            *user,
            *target,
            *k,
            gsu.clone(),
            checkpoint.clone(),
            mode,
        ),
        Command::Bench {
            seq_len,
            dim,
            k,
            repetitions,
            parallel,
            scaling,
        } => bench(
            &cli,
            [*seq_len, *dim, *k, *repetitions],
            *parallel,
            *scaling,
            mode,
        ),
        Command::Simulate { scenario, trace } => simulate(&cli, scenario.clone(), *trace, mode),
        Command::Ablate => ablate(&cli, mode),
    }
}

fn ingest(cli: &Cli, args: &DataArgs, mode: Mode) -> Result<()> {
    let (mut value, base) = load_config(cli)?;
    set(&mut value, "data", args.data.clone())?;
    set(&mut value, "embeddings", args.embeddings.clone())?;
    set(&mut value, "dim", args.dim)?;
    if args.permissive {
        set(&mut value, "lookup", Some(LookupMode::Permissive))?;
    }
    let mut cfg: IngestRun = typed(value, "ingest")?;
    cfg.resolve(&base);
    let mut run = Run::new("ingest", &cli.out, None, mode)?;
    let (dataset, _, mut manifest) = muse_core::dataset::ingest(
        &cfg.data,
        &cfg.embeddings,
        muse_core::dataset::IngestOptions {
            mode,
            embedding_dim: cfg.dim,
            lookup: cfg.lookup,
        },
    )?;
    run.input(
        cfg.data.display().to_string(),
        manifest.checksums["samples"].clone(),
    );
    run.input(
        cfg.embeddings.display().to_string(),
        manifest.checksums["embeddings"].clone(),
    );
    if let Some(policy) = &cfg.split {
        let (tr, te) = split(&dataset, policy)?;
        manifest.split = Some(SplitSummary {
            policy: policy.clone(),
            train: tr.len(),
            test: te.len(),
        });
    }
    println!(
        "samples {}  users {}  items {}  positives {}  max_len {}  misses {}",
        manifest.samples,
        manifest.users,
        manifest.distinct_items,
        manifest.positives,
        manifest.max_behavior_length,
        manifest.embedding_misses
    );
    run.write_json("manifest.json", &manifest)?;
    run.finish(&cfg)
}

fn synthesize(cli: &Cli, users: Option<u64>, signal: Option<f64>, mode: Mode) -> Result<()> {
    let (mut value, _) = load_config(cli)?;
    let seed = require_seed(seed_of(cli, &value)?, "synthesize")?;
    set(&mut value, "seed", Some(seed))?;
    set(&mut value, "users", users)?;
    set(&mut value, "signal_strength", signal)?;
    let cfg: SyntheticConfig = typed(value, "synthetic")?;
    if cfg.max_sequence > mode.max_behaviors() {
        return Err(MuseError::Config(format!(
            "max_sequence {} exceeds the {mode:?} cap of {}",
            cfg.max_sequence,
            mode.max_behaviors()
        )));
    }
    let mut run = Run::new("synthesize", &cli.out, Some(seed), mode)?;
    let data = muse_core::dataset::synthesize(&cfg)?;
    let (_, manifest) = write_synthetic(&data, &cli.out)?;
    for name in [
        "samples.jsonl",
        "embeddings.bin",
        "embeddings.bin.json",
        "manifest.json",
    ] {
        run.output(name)?;
    }
    println!(
        "samples {}  users {}  items {}  positives {}  max_len {}",
        manifest.samples,
        manifest.users,
        manifest.distinct_items,
        manifest.positives,
        manifest.max_behavior_length
    );
    run.finish(&cfg)
}

fn train_cmd(cli: &Cli, mode: Mode) -> Result<()> {
    let (mut value, base) = load_config(cli)?;
    let seed = require_seed(seed_of(cli, &value)?, "train")?;
    set(&mut value, "seed", Some(seed))?;
    let mut cfg: TrainRun = typed(value, "train")?;
    cfg.resolve(&base);
    let mut run = Run::new("train", &cli.out, Some(seed), mode)?;
    let loaded = cfg.source.load(mode, seed)?;
    for (k, v) in &loaded.inputs {
        run.input(k.clone(), v.clone());
    }
    let (train_set, _) = split(&loaded.dataset, &cfg.split)?;
    let registry = RetrieverRegistry::with_builtins();
    let mut model = CtrModel::new(cfg.model.clone(), &registry, &loaded.table, seed)?;
    let cache = if model.retriever().uses_learned_embeddings() {
        None
    } else {
        Some(prepare_retrievals(&model, &train_set.samples, &loaded.table)?)
    };
    let log = train(
        &mut model,
        &train_set.samples,
        &loaded.table,
        &cfg.train,
        cache.as_deref(),
    )?;
    let meta = CheckpointMeta {
        version: env!("CARGO_PKG_VERSION").into(),
        config: model.config.clone(),
        train: Some(cfg.train.clone()),
        seed,
        steps: log.steps.len() as u64,
        item_vocab: model.params.item_vocab.clone(),
    };
    write_checkpoint(run.path("checkpoint.bin"), &meta, &model.params)?;
    run.output("checkpoint.bin")?;
    run.write_json("training_log.json", &log)?;
    println!(
        "trained {} samples in {} steps  head loss {}  tail loss {}",
        log.samples_seen,
        log.steps.len(),
        fmt_opt(log.head_loss(20)),
        fmt_opt(log.tail_loss(20))
    );
    run.finish(&cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

/// One line of a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    user_id: u64,
    score: f64,
    label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    item_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    behavior_len: Option<usize>,
}

fn read_predictions(path: &Path) -> Result<Vec<EvalRecord>> {
    let f = File::open(path).map_err(|e| MuseError::io(path, e))?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| MuseError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line).map_err(|e| MuseError::Record {
            index,
            message: e.to_string(),
        })?;
        if p.label > 1 || !p.score.is_finite() {
            return Err(MuseError::Record {
                index,
                message: "label must be 0 or 1 and score finite".into(),
            });
        }
        out.push(EvalRecord {
            user: UserId(p.user_id),
            score: p.score,
            label: p.label == 1,
            behavior_len: p.behavior_len,
            item: p.item_id.map(ItemId),
        });
    }
    Ok(out)
}

fn write_predictions(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| MuseError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = PredictionLine {
            user_id: r.user.0,
            score: r.score,
            label: r.label as u8,
            item_id: r.item.map(|i| i.0),
            behavior_len: r.behavior_len,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| MuseError::io(path, e))?;
    }
    w.flush().map_err(|e| MuseError::io(path, e))
}

fn print_report(r: &EvaluationReport) {
    println!(
        "records {}  positives {}  groups {}/{} valid",
        r.records, r.positives, r.groups_valid, r.groups_total
    );
    println!("gauc {}  auc {}", fmt_opt(r.gauc), fmt_opt(r.auc));
    for (title, groups) in [
        ("behavior length", &r.by_behavior_length),
        ("item popularity", &r.by_item_popularity),
    ] {
        if groups.is_empty() {
            continue;
        }
        println!("by {title}:");
        for g in groups {
            println!(
                "  {:>2}  [{:>6}, {:>6}]  n={:<7} gauc {}",
                g.group,
                g.key_min,
                g.key_max,
                g.records,
                fmt_opt(g.gauc)
            );
        }
    }
}

fn eval(cli: &Cli, predictions: Option<PathBuf>, checkpoint: Option<PathBuf>, mode: Mode) -> Result<()> {
    let (mut value, base) = load_config(cli)?;
    let seed = seed_of(cli, &value)?;
    set(&mut value, "seed", seed)?;
    let mut cfg: EvalRun = typed(value, "eval")?;
    cfg.resolve(&base);
    if predictions.is_some() {
        cfg.predictions = predictions;
    }
    if checkpoint.is_some() {
        cfg.checkpoint = checkpoint;
    }
    let mut run = Run::new("eval", &cli.out, seed, mode)?;
    let records = match (&cfg.predictions, &cfg.checkpoint) {
        (Some(p), _) => {
            let (k, v) = checksum_input(p)?;
            run.input(k, v);
            read_predictions(p)?
        }
        (None, Some(ck)) => {
            let source = cfg
                .source
                .as_ref()
                .ok_or_else(|| MuseError::Config("checkpoint evaluation needs a `source`".into()))?;
            let (k, v) = checksum_input(ck)?;
            run.input(k, v);
            let ck = read_checkpoint(ck)?;
            let loaded = source.load(mode, seed.unwrap_or(ck.meta.seed))?;
            for (k, v) in &loaded.inputs {
                run.input(k.clone(), v.clone());
            }
            let test = test_part(loaded.dataset, cfg.split.as_ref())?;
            let model =
                CtrModel::with_params(ck.meta.config, &RetrieverRegistry::with_builtins(), ck.params)?;
            let preds = predict_batch(&model, &test.samples, &loaded.table, None)?;
            let records = preds.eval_records(&test.samples);
            write_predictions(&run.path("predictions.jsonl"), &records)?;
            run.output("predictions.jsonl")?;
            records
        }
        (None, None) => {
            return Err(MuseError::Config(
                "eval needs `predictions` or `checkpoint`".into(),
            ));
        }
    };
    let report = evaluate(&records, cfg.weighting);
    print_report(&report);
    run.write_json("eval.json", &report)?;
    run.finish(&cfg)
}

#[allow(clippy::too_many_arguments)]
fn retrieve(
    cli: &Cli,
    data: &DataArgs,
    user: Option<u64>,
    target: Option<u64>,
    k: Option<usize>,
    gsu: Option<String>,
    checkpoint: Option<PathBuf>,
    mode: Mode,
) -> Result<()> {
    let (mut value, base) = load_config(cli)?;
    let seed = seed_of(cli, &value)?;
    set(&mut value, "seed", seed)?;
    if let Some(src) = files_source(data) {
        set(&mut value, "source", Some(src))?;
    }
    set(&mut value, "user", user)?;
    set(&mut value, "target", target)?;
    set(&mut value, "k", k)?;
    set(&mut value, "gsu", gsu)?;
    set(&mut value, "checkpoint", checkpoint)?;
    let mut cfg: RetrieveRun = typed(value, "retrieve")?;
    cfg.resolve(&base);
    let mut run = Run::new("retrieve", &cli.out, seed, mode)?;
    let loaded = cfg.source.load(mode, seed.unwrap_or(0))?;
    for (k, v) in &loaded.inputs {
        run.input(k.clone(), v.clone());
    }
    let sample = loaded
        .dataset
        .iter()
        .find(|s| s.user == UserId(cfg.user))
        .ok_or_else(|| MuseError::Data(format!("user {} has no samples", cfg.user)))?;
    let target_category = loaded
        .dataset
        .iter()
        .find(|s| s.target.item == ItemId(cfg.target))
        .map(|s| s.target.category);
    let registry = RetrieverRegistry::with_builtins();
    let retriever = registry.get(&cfg.gsu)?;
    let params = match &cfg.checkpoint {
        Some(p) => {
            let (k, v) = checksum_input(p)?;
            run.input(k, v);
            Some(read_checkpoint(p)?.params)
        }
        None if retriever.uses_learned_embeddings() => {
            return Err(MuseError::Config(format!(
                "strategy `{}` needs a checkpoint",
                cfg.gsu
            )));
        }
        None => None,
    };
    let seq: &BehaviorSequence = &sample.sequence;
    let req = RetrievalRequest {
        target: ItemId(cfg.target),
        target_category,
        sequence: seq,
        multimodal: &loaded.table,
        id_vectors: params.as_ref().map(|p| p as &dyn IdVectorSource),
        mode: LookupMode::Strict,
    };
    let got = retriever.retrieve(&req, cfg.k)?;
    let rows: Vec<Value> = got
        .indices
        .iter()
        .zip(&got.scores)
        .map(|(&i, &s)| {
            println!("{}\t{:.6}", seq.items[i], s);
            json!({"position": i, "item_id": seq.items[i].0, "score": s})
        })
        .collect();
    run.write_json(
        "retrieval.json",
        &json!({"user": cfg.user, "target": cfg.target, "gsu": cfg.gsu, "k": cfg.k, "results": rows}),
    )?;
    run.finish(&cfg)
}

fn bench(cli: &Cli, overrides: [Option<usize>; 4], parallel: bool, scaling: bool, mode: Mode) -> Result<()> {
    let (mut value, _) = load_config(cli)?;
    for (key, v) in ["seq_len", "dim", "k", "repetitions"].into_iter().zip(overrides) {
        set(&mut value, key, v)?;
    }
    set(&mut value, "seed", cli.seed)?;
    if parallel {
        set(&mut value, "parallel", Some(true))?;
    }
    let cfg: BenchConfig = typed(value, "bench")?;
    let mut run = Run::new("bench", &cli.out, Some(cfg.seed), mode)?;
    let print = |r: &muse_core::serving::BenchReport| {
        println!(
            "seq_len {:>7}  dim {}  k {}  mean {:.3} ms  sd {:.3} ms  {:.1} scans/s  {:.2} GB/s  oracle {}",
            r.seq_len,
            r.dim,
            r.k,
            r.mean_ms,
            r.stddev_ms,
            r.scans_per_sec,
            r.gb_per_sec,
            if r.oracle_passed { "ok" } else { "FAILED" }
        )
    };
    if scaling {
        let rep = bench_scaling(&cfg)?;
        print(&rep.base);
        print(&rep.doubled);
        println!("scaling ratio {:.3}", rep.ratio);
        run.write_json("bench.json", &rep)?;
    } else {
        let rep = bench_retrieval(&cfg)?;
        print(&rep);
        run.write_json("bench.json", &rep)?;
    }
    // timings vary between runs, so the report is not a reproducible artifact
    run.finish(&json!({"bench": cfg, "scaling": scaling}))
}

fn simulate(cli: &Cli, scenario: Option<String>, trace: bool, mode: Mode) -> Result<()> {
    let (mut value, _) = load_config(cli)?;
    let seed = require_seed(seed_of(cli, &value)?, "simulate")?;
    set(&mut value, "seed", Some(seed))?;
    if scenario.is_some() {
        set(&mut value, "scenario", scenario)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("config");
        }
    }
    if trace {
        set(&mut value, "trace_csv", Some(true))?;
    }
    let cfg: SimulateRun = typed(value, "simulate")?;
    let scenario_cfg = match (&cfg.config, &cfg.scenario) {
        (Some(c), _) => c.clone(),
        (None, Some(name)) => ScenarioRegistry::with_builtins().get(name)?.config(),
        (None, None) => {
            return Err(MuseError::Config("simulate needs `scenario` or `config`".into()));
        }
    };
    let mut run = Run::new("simulate", &cli.out, Some(seed), mode)?;
    let report = run_scenario(&scenario_cfg, seed)?;
    println!(
        "scenario {}  requests {}  cache hit rate {:.4}",
        report.scenario, report.requests, report.cache_hit_rate
    );
    println!(
        "{:<6} {:>9} {:>9} {:>9} {:>9}",
        "mode", "mean", "p50", "p95", "p99"
    );
    for (name, s) in [("async", &report.async_latency), ("sync", &report.sync_latency)] {
        println!(
            "{:<6} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            name, s.mean_ms, s.p50_ms, s.p95_ms, s.p99_ms
        );
    }
    println!(
        "mean exposed prefetch {:.3} ms  ({:.2}% of requests)",
        report.mean_exposed_prefetch_ms,
        100.0 * report.exposed_fraction
    );
    run.write_json("report.json", &report)?;
    if cfg.trace_csv {
        write_trace_csv(&report, run.path("trace.csv"))?;
        run.output("trace.csv")?;
    }
    run.finish(&json!({"run": cfg, "scenario": scenario_cfg}))
}

fn ablate(cli: &Cli, mode: Mode) -> Result<()> {
    let (mut value, base) = load_config(cli)?;
    let seed = require_seed(seed_of(cli, &value)?, "ablate")?;
    set(&mut value, "seed", Some(seed))?;
    let mut cfg: AblateRun = typed(value, "ablate")?;
    cfg.resolve(&base);
    let mut run = Run::new("ablate", &cli.out, Some(seed), mode)?;
    let loaded = cfg.source.load(mode, seed)?;
    for (k, v) in &loaded.inputs {
        run.input(k.clone(), v.clone());
    }
    let report = run_ablation(
        &loaded.dataset,
        &loaded.table,
        &cfg.ablation,
        &RetrieverRegistry::with_builtins(),
        seed,
    )?;
    print!("{}", report.table());
    run.write_json("ablation.json", &report)?;
    run.finish(&cfg)
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use muse_core::dataset::{synthesize, Sample, SyntheticConfig};
use muse_core::embedding_store::{normalize_table, EmbeddingTable, LookupMode};
use muse_core::esu::{sa_ta, simtier, AttentionParams};
use muse_core::gsu::{gsu_retrieve, score_sequence, top_k_select, BehaviorSequence, RetrieverRegistry};
use muse_core::metrics::{auc, gauc, EvalRecord};
use muse_core::model::{CtrModel, EsuVariant, Gradients, ModelConfig, Retrieval};
use muse_core::serving::{
    bench_scaling, pipeline_total, simulate_request, BenchConfig, EmbeddingCache, PipelineMode,
    StageLatencies,
};
use muse_core::tensor::Matrix;
use muse_core::{ItemId, UserId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Best-first by score, larger index first on ties.
fn sort_oracle(scores: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(b.cmp(&a)));
    idx.truncate(k);
    let s = idx.iter().map(|&i| scores[i]).collect();
    (idx, s)
}

fn gsu_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (dim, k, pool) = (128, 50, 20_000u64);
    let rows: Vec<(ItemId, Vec<f64>)> = (0..pool)
        .map(|i| (ItemId(i), random_unit(&mut rng, dim)))
        .collect();
    let raw: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
    let table = normalize_table(EmbeddingTable::from_rows(dim, rows).unwrap()).unwrap();
    let mut ties = 0;
    let mut worst_cos = 0.0f64;
    for inst in 0..1000 {
        let len = rng.random_range(1..=5000);
        // a small item range now and then forces repeated behaviors and exact ties
        let range = if inst % 4 == 0 { 200 } else { pool };
        let items: Vec<ItemId> = (0..len).map(|_| ItemId(rng.random_range(0..range))).collect();
        let target = ItemId(rng.random_range(0..pool));
        let seq = BehaviorSequence::new(UserId(inst), items.clone());
        let scores = score_sequence(table.get(target).unwrap(), &items, &table, LookupMode::Strict).unwrap();
        let (oi, os) = sort_oracle(scores.as_slice(), k);
        let sel = top_k_select(scores.as_slice(), k);
        let got = gsu_retrieve(target, &seq, &table, k, LookupMode::Strict).map_err(|e| e.to_string())?;
        check(
            sel.indices == oi && sel.scores == os,
            format!("instance {inst}: top_k_select differs"),
        )?;
        check(
            got.indices == oi && got.scores == os,
            format!("instance {inst}: gsu_retrieve differs"),
        )?;
        if os.windows(2).any(|w| w[0] == w[1]) {
            ties += 1;
        }
        for (&i, &s) in oi.iter().zip(&os).take(3) {
            let a = &raw[target.0 as usize];
            let b = &raw[items[i].0 as usize];
            let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
            worst_cos = worst_cos.max((cos - s).abs());
        }
    }
    check(
        worst_cos < 1e-12,
        format!("scores differ from cosine by {worst_cos:e}"),
    )?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("suite took {secs:.1} s"))?;
    Ok(format!(
        "1000 instances exact, {ties} with tied scores, {secs:.1} s"
    ))
}

fn simtier_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let edges = [-1.0, -0.5, -0.25, 0.0, 0.125, 0.25, 0.5, 0.75, 1.0];
    for v in 0..1000 {
        let len = rng.random_range(0..400);
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.1) {
                    edges[rng.random_range(0..edges.len())]
                } else {
                    rng.random_range(-1.0..=1.0)
                }
            })
            .collect();
        for n in [2usize, 4, 8, 16] {
            let h = simtier(&scores, n).map_err(|e| e.to_string())?;
            let h2 = simtier(&scores, 2 * n).map_err(|e| e.to_string())?;
            check(
                h.total() == len as u64 && h2.total() == len as u64,
                format!("vector {v}: counts lost"),
            )?;
            check(
                h2.merge_pairs() == h,
                format!("vector {v}: merged {}-tier != {n}-tier", 2 * n),
            )?;
        }
    }
    Ok("1000 vectors, N in {2,4,8,16}".into())
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Standard target attention with explicit loops.
fn reference_ta(e: &[f64], beh: &[Vec<f64>], wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Vec<f64> {
    let proj = |x: &[f64], w: &Matrix| -> Vec<f64> {
        (0..w.cols)
            .map(|c| (0..w.rows).map(|r| x[r] * w.get(r, c)).sum())
            .collect()
    };
    let q = proj(e, wq);
    let logits: Vec<f64> = beh
        .iter()
        .map(|b| {
            let k = proj(b, wk);
            q.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() / (wq.cols as f64).sqrt()
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    let mut out = vec![0.0; wv.cols];
    for (b, w) in beh.iter().zip(&ex) {
        for (o, v) in out.iter_mut().zip(proj(b, wv)) {
            *o += w / z * v;
        }
    }
    out
}

fn sa_ta_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for cfg in 0..100 {
        let (d_id, d_att, d_out) = (
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        let n = rng.random_range(1..21);
        let params = AttentionParams {
            w_q: random_matrix(&mut rng, d_id, d_att),
            w_k: random_matrix(&mut rng, d_id, d_att),
            w_v: random_matrix(&mut rng, d_id, d_out),
            gamma: [1.0, 0.0, 0.0],
        };
        let e: Vec<f64> = (0..d_id).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beh: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d_id).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let flat: Vec<f64> = beh.concat();
        let got = sa_ta(&e, &flat, &sims, &params, None).map_err(|e| e.to_string())?;
        let want = reference_ta(&e, &beh, &params.w_q, &params.w_k, &params.w_v);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        check(worst <= 1e-12, format!("config {cfg}: deviation {worst:e}"))?;
    }
    Ok(format!("100 configs, max deviation {worst:.1e}"))
}

fn tiny_world(seed: u64) -> (EmbeddingTable, Vec<Sample>) {
    let cfg = SyntheticConfig {
        seed,
        users: 6,
        items: 60,
        dim: 8,
        clusters: 6,
        categories: 5,
        min_sequence: 5,
        max_sequence: 30,
        samples_per_user: 3,
        recent_window: 3,
        base_ctr: 0.4,
        ..Default::default()
    };
    let data = synthesize(&cfg).unwrap();
    (data.table, data.dataset.samples)
}

fn gradient_checks() -> Outcome {
    let classes = [
        "attention.gamma",
        "attention.w_q",
        "attention.w_k",
        "attention.w_v",
        "id_embeddings",
        "tower.w",
    ];
    let mut counts = [0usize; 6];
    let mut worst = 0.0f64;
    let h = 1e-4;
    for world in 0..7u64 {
        let (table, samples) = tiny_world(100 + world);
        let config = ModelConfig {
            esu: EsuVariant::SaTaSimTier,
            k: 8,
            n_tiers: 4,
            id_dim: 5,
            att_dim: 4,
            out_dim: 3,
            context_dim: 2,
            context_buckets: 11,
            hidden: vec![6, 4],
            ..Default::default()
        };
        let mut m = CtrModel::new(config, &RetrieverRegistry::with_builtins(), &table, world).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(world);
        m.params.attention.gamma = [
            rng.random_range(0.5..1.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let rets: Vec<Retrieval> = samples.iter().map(|s| m.retrieve(s, &table).unwrap()).collect();
        let pairs: Vec<(&Sample, &Retrieval)> = samples.iter().zip(&rets).collect();
        let loss = |m: &CtrModel| {
            let mut g = Gradients::zeros_like(&m.params);
            m.loss_and_gradients(&pairs, &mut g).unwrap()
        };
        let mut grads = Gradients::zeros_like(&m.params);
        m.loss_and_gradients(&pairs, &mut grads)
            .map_err(|e| e.to_string())?;
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let names: Vec<String> = m.params.tensors().into_iter().map(|(n, _, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let class = if name.starts_with("tower.") && name.ends_with(".w") {
                5
            } else if let Some(c) = classes.iter().position(|c| c == name) {
                c
            } else {
                continue;
            };
            // entries with a live gradient; untouched embedding rows are exactly zero
            let mut live: Vec<usize> = (0..analytic[ti].len())
                .filter(|&j| analytic[ti][j] != 0.0)
                .collect();
            live.shuffle(&mut rng);
            let per = if class == 5 { 2 } else { 3 };
            for &j in live.iter().take(per) {
                let mut plus = m.clone();
                plus.params.tensors_mut()[ti].1[j] += h;
                let mut minus = m.clone();
                minus.params.tensors_mut()[ti].1[j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[ti][j];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                worst = worst.max(err);
                check(err < 1e-4, format!("{name}[{j}]: analytic {a:e} vs fd {fd:e}"))?;
                counts[class] += 1;
            }
        }
    }
    for (c, n) in classes.iter().zip(counts) {
        check(n >= 20, format!("only {n} checks for {c}"))?;
    }
    Ok(format!(
        "{} checks per class (min), max relative error {worst:.1e}",
        counts.iter().min().unwrap()
    ))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..500 {
        let n = rng.random_range(2..200);
        let levels = if inst % 2 == 0 { 5 } else { 1_000_000 };
        let mut recs: Vec<EvalRecord> = (0..n)
            .map(|_| {
                EvalRecord::new(
                    UserId(0),
                    rng.random_range(0..levels) as f64 / levels as f64,
                    rng.random_bool(0.4),
                )
            })
            .collect();
        recs[0].label = true;
        recs[1].label = false;
        let pos: Vec<f64> = recs.iter().filter(|r| r.label).map(|r| r.score).collect();
        let neg: Vec<f64> = recs.iter().filter(|r| !r.label).map(|r| r.score).collect();
        let mut twice = 0u64;
        for p in &pos {
            for q in &neg {
                twice += if p > q {
                    2
                } else if p == q {
                    1
                } else {
                    0
                };
            }
        }
        let brute = twice as f64 / (2 * pos.len() * neg.len()) as f64;
        check(
            auc(&recs) == Some(brute),
            format!("instance {inst}: {:?} vs {brute}", auc(&recs)),
        )?;
    }
    let mut recs = vec![
        EvalRecord::new(UserId(1), 0.9, true),
        EvalRecord::new(UserId(1), 0.1, false),
    ];
    for (s, l) in [(0.9, true), (0.8, false), (0.1, true), (0.3, false)] {
        recs.push(EvalRecord::new(UserId(2), s, l));
    }
    let g = gauc(&recs).ok_or("undefined GAUC")?;
    check(auc(&recs[2..]) == Some(0.5), "user B AUC is not 0.5")?;
    check((g - 4.0 / 6.0).abs() < 1e-12, format!("hand example gave {g}"))?;
    Ok(format!("500 instances exact, hand example {g:.12}"))
}

fn muse_bin() -> &'static str {
    env!("CARGO_BIN_EXE_muse")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_muse(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = Command::new(muse_bin())
        .args(args)
        .current_dir(dir)
        .env("MUSE_LOG", "off")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("muse {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ablation_report(config: &Path, seed: u64, dir: &Path) -> Result<Value, String> {
    let out = dir.join(format!("ablate-{seed}"));
    let seed = seed.to_string();
    run_muse(
        &[
            "ablate",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            &seed,
            "--out",
            out.to_str().unwrap(),
        ],
        dir,
    )?;
    serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())
}

fn cell(report: &Value, gsu: &str, esu: &str) -> Result<f64, String> {
    report["cells"]
        .as_array()
        .and_then(|cells| cells.iter().find(|c| c["gsu"] == gsu && c["esu"] == esu))
        .and_then(|c| c["gauc"].as_f64())
        .ok_or_else(|| format!("no GAUC for {gsu}/{esu}"))
}

fn directional_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut failures = Vec::new();
    for seed in 0..3 {
        let r = ablation_report(&configs_dir().join("ablation.json"), seed, dir.path())?;
        let samples = r["train_samples"].as_u64().unwrap_or(0) + r["test_samples"].as_u64().unwrap_or(0);
        check(samples >= 200_000, format!("only {samples} samples"))?;
        let full = cell(&r, "muse", "sa_ta+simtier")?;
        let hist = cell(&r, "muse", "simtier_only")?;
        let base = cell(&r, "recent", "ta_only")?;
        min_margin = min_margin.min(full - base);
        lines.push(format!("seed {seed}: {full:.4} > {hist:.4} > {base:.4}"));
        if !(full > hist && hist > base && full - base >= 0.01) {
            failures.push(seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{}; min margin {min_margin:.4}; {secs:.0} s", lines.join(", "));
    check(failures.is_empty() && secs < 1800.0, detail.clone())?;
    Ok(detail)
}

fn null_calibration() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..2 {
        let r = ablation_report(&configs_dir().join("ablation_null.json"), seed, dir.path())?;
        for c in r["cells"].as_array().ok_or("no cells")? {
            let g = c["gauc"].as_f64().ok_or("undefined GAUC")?;
            worst = worst.max((g - 0.5).abs());
            n += 1;
        }
    }
    check(worst <= 0.03, format!("max |GAUC - 0.5| = {worst:.4}"))?;
    Ok(format!("{n} cells over 2 seeds, max |GAUC - 0.5| = {worst:.4}"))
}

fn latency_hiding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for draw in 0..1000 {
        let matching = rng.random_range(1..100_000u64);
        let mut lat = StageLatencies {
            matching,
            prefetch: 0,
            topk: rng.random_range(0..10_000),
            esu: rng.random_range(0..100_000),
            other: rng.random_range(0..20_000),
        };
        let expected = matching + lat.topk.max(lat.other) + lat.esu;
        for prefetch in [0, matching, rng.random_range(0..=matching)] {
            lat.prefetch = prefetch;
            let mut cold = EmbeddingCache::<UserId, ()>::new(16);
            let a = simulate_request(&lat, PipelineMode::Async, UserId(draw), &mut cold);
            let mut cold = EmbeddingCache::<UserId, ()>::new(16);
            let s = simulate_request(&lat, PipelineMode::Sync, UserId(draw), &mut cold);
            check(!a.cache_hit && !s.cache_hit, "cache was not cold")?;
            check(
                a.total == expected,
                format!("draw {draw}: async {} != {expected}", a.total),
            )?;
            check(
                a.total == pipeline_total(&lat, PipelineMode::Async, false),
                "trace disagrees with total",
            )?;
            check(
                a.total <= s.total,
                format!("draw {draw}: async {} > sync {}", a.total, s.total),
            )?;
        }
    }
    Ok("1000 draws, async total independent of prefetch, async <= sync".into())
}

fn benchmark() -> Outcome {
    let cfg = BenchConfig {
        seq_len: 100_000,
        dim: 128,
        k: 50,
        repetitions: 10,
        warmup: 1,
        seed: 0,
        parallel: false,
    };
    let r = bench_scaling(&cfg).map_err(|e| e.to_string())?;
    let detail = format!(
        "100K scan {:.1} ms, 200K scan {:.1} ms, ratio {:.2}",
        r.base.mean_ms, r.doubled.mean_ms, r.ratio
    );
    check(
        r.base.oracle_passed && r.doubled.oracle_passed,
        "oracle gate failed",
    )?;
    check(
        r.base.mean_ms < 100.0 && (1.6..=2.6).contains(&r.ratio),
        detail.clone(),
    )?;
    Ok(detail)
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(
        d.join("train.json"),
        r#"{"source": {"synthetic": {"users": 150, "samples_per_user": 8, "min_sequence": 50, "max_sequence": 300}},
            "train": {"batch_size": 64}}"#,
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        d.join("ablate.json"),
        r#"{"source": {"synthetic": {"users": 100, "samples_per_user": 8, "min_sequence": 50, "max_sequence": 300}},
            "ablation": {"cells": [{"gsu": "muse", "esu": "sa_ta+simtier"}, {"gsu": "recent", "esu": "ta_only"},
            {"gsu": "id_similarity", "esu": "ta+simtier"}]}}"#,
    )
    .map_err(|e| e.to_string())?;
    let read = |p: &str| std::fs::read(d.join(p)).map_err(|e| e.to_string());
    for out in ["t1", "t2"] {
        run_muse(
            &["train", "--config", "train.json", "--seed", "11", "--out", out],
            d,
        )?;
    }
    for out in ["a1", "a2"] {
        run_muse(
            &["ablate", "--config", "ablate.json", "--seed", "11", "--out", out],
            d,
        )?;
    }
    for f in ["checkpoint.bin", "training_log.json", "run_manifest.json"] {
        check(
            read(&format!("t1/{f}"))? == read(&format!("t2/{f}"))?,
            format!("train {f} differs"),
        )?;
    }
    for f in ["ablation.json", "run_manifest.json"] {
        check(
            read(&format!("a1/{f}"))? == read(&format!("a2/{f}"))?,
            format!("ablate {f} differs"),
        )?;
    }
    Ok("train checkpoint/log and ablate report bit-identical".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gsu oracle equivalence", gsu_oracle_equivalence),
        ("simtier correctness", simtier_correctness),
        ("sa-ta reduction", sa_ta_reduction),
        ("gradient checks", gradient_checks),
        ("metric oracle", metric_oracle),
        ("directional ablation", directional_ablation),
        ("null calibration", null_calibration),
        ("latency hiding", latency_hiding),
        ("100k benchmark", benchmark),
        ("reproducibility", reproducibility),
    ];
    let only: Option<usize> = std::env::var("MUSE_ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

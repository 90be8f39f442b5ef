use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use muse_core::embedding_store::{write_table, EmbeddingTable};
use muse_core::ItemId;
use serde_json::Value;

fn muse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muse"))
        .args(args)
        .current_dir(dir)
        .env("MUSE_LOG", "off")
        .output()
        .expect("spawn muse")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("stderr is JSON")
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Four-dimensional items 1..=6 and one user with behaviors [1..5].
fn tiny_files(dir: &Path) -> (PathBuf, PathBuf, Vec<Vec<f64>>) {
    let vecs: Vec<Vec<f64>> = vec![
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.6, 0.8, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.8, 0.0, 0.0, 0.6],
        vec![0.5, 0.5, 0.5, 0.5],
    ];
    let table = EmbeddingTable::from_rows(
        4,
        vecs.iter()
            .enumerate()
            .map(|(i, v)| (ItemId(i as u64 + 1), v.clone())),
    )
    .unwrap();
    let emb = dir.join("emb.bin");
    write_table(&table, &emb).unwrap();
    let data = dir.join("samples.jsonl");
    let line = |user: u64, item: u64, label: u8| {
        format!(
            r#"{{"user_id":{user},"age":1,"gender":0,"city":2,"province":3,"item_id":{item},"category":0,"item_city":2,"item_province":3,"behaviors":[1,2,3,4,5],"label":{label},"ts":{user}}}"#
        )
    };
    let text = [line(7, 6, 1), line(7, 3, 0), line(8, 6, 0), line(8, 1, 1)].join("\n");
    fs::write(&data, text + "\n").unwrap();
    (data, emb, vecs)
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&muse(&["--help"], dir.path())), 0);
    assert_eq!(code(&muse(&["--version"], dir.path())), 0);
}

#[test]
fn bad_arguments_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = muse(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(error_json(&o)["error"]["kind"], "config");

    let o = muse(&["train", "--out", "t"], dir.path());
    assert_eq!(code(&o), 2, "train without a seed");
    for cmd in ["synthesize", "simulate", "ablate"] {
        assert_eq!(code(&muse(&[cmd], dir.path())), 2, "{cmd} without a seed");
    }
}

#[test]
fn unknown_config_keys_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"users": 3, "colour": "blue"}"#).unwrap();
    let o = muse(&["synthesize", "--config", "c.json", "--seed", "1"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(error_json(&o)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("colour"));

    fs::write(dir.path().join("s.json"), r#"{"scenario": "bursty", "extra": 1}"#).unwrap();
    let o = muse(&["simulate", "--config", "s.json", "--seed", "1"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn data_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, _) = tiny_files(dir.path());
    let o = muse(
        &[
            "ingest",
            "--data",
            data.to_str().unwrap(),
            "--embeddings",
            "missing.bin",
            "--dim",
            "4",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    assert_eq!(error_json(&o)["error"]["kind"], "data");

    fs::write(dir.path().join("bad.jsonl"), "{\"user_id\": 1}\n").unwrap();
    let o = muse(
        &[
            "ingest",
            "--data",
            "bad.jsonl",
            "--embeddings",
            "emb.bin",
            "--dim",
            "4",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn ingest_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    tiny_files(dir.path());
    let o = muse(
        &[
            "ingest",
            "--data",
            "samples.jsonl",
            "--embeddings",
            "emb.bin",
            "--dim",
            "4",
            "--out",
            "ing",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(dir.path().join("ing/manifest.json"));
    assert_eq!(m["samples"], 4);
    assert_eq!(m["users"], 2);
    let run = read_json(dir.path().join("ing/run_manifest.json"));
    assert_eq!(run["command"], "ingest");
    assert_eq!(run["inputs"].as_object().unwrap().len(), 2);
    assert!(run["outputs"]["manifest.json"].is_string());
}

#[test]
fn retrieve_prints_k_lines_in_descending_order() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, vecs) = tiny_files(dir.path());
    let o = muse(
        &[
            "retrieve",
            "--data",
            "samples.jsonl",
            "--embeddings",
            "emb.bin",
            "--dim",
            "4",
            "--user",
            "7",
            "--target",
            "1",
            "--k",
            "3",
            "--out",
            "r",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<(u64, f64)> = stdout(&o)
        .lines()
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.windows(2).all(|w| w[0].1 >= w[1].1));

    // unit vectors, so cosine with item 1 is the first coordinate
    let mut expect: Vec<(u64, f64)> = (0..5).map(|i| (i as u64 + 1, vecs[i][0])).collect();
    expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0)));
    let ids: Vec<u64> = lines.iter().map(|l| l.0).collect();
    assert_eq!(ids, vec![expect[0].0, expect[1].0, expect[2].0]);
    for (got, want) in lines.iter().zip(&expect) {
        assert!((got.1 - want.1).abs() < 1e-6);
    }
    let saved = read_json(dir.path().join("r/retrieval.json"));
    assert_eq!(saved["results"].as_array().unwrap().len(), 3);
}

#[test]
fn retrieve_with_learned_strategy_needs_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    tiny_files(dir.path());
    let o = muse(
        &[
            "retrieve",
            "--data",
            "samples.jsonl",
            "--embeddings",
            "emb.bin",
            "--dim",
            "4",
            "--user",
            "7",
            "--target",
            "1",
            "--gsu",
            "id_similarity",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let o = muse(
        &[
            "retrieve",
            "--data",
            "samples.jsonl",
            "--embeddings",
            "emb.bin",
            "--dim",
            "4",
            "--user",
            "7",
            "--target",
            "1",
            "--gsu",
            "nearest",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2, "unknown strategy");
}

#[test]
fn eval_perfect_ranking_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    for user in 0..5u64 {
        for j in 0..6u64 {
            let label = u8::from(j < 2);
            let score = if label == 1 {
                0.9 - j as f64 * 0.01
            } else {
                0.1 * j as f64 / 6.0
            };
            lines.push(format!(r#"{{"user_id":{user},"score":{score},"label":{label}}}"#));
        }
    }
    fs::write(dir.path().join("p.jsonl"), lines.join("\n")).unwrap();
    let o = muse(&["eval", "--predictions", "p.jsonl", "--out", "e"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(dir.path().join("e/eval.json"));
    assert_eq!(r["gauc"], 1.0);
    assert_eq!(r["auc"], 1.0);

    fs::write(
        dir.path().join("bad.jsonl"),
        r#"{"user_id":1,"score":0.5,"label":2}"#,
    )
    .unwrap();
    assert_eq!(
        code(&muse(&["eval", "--predictions", "bad.jsonl"], dir.path())),
        3
    );
}

fn small_synthetic(dir: &Path) {
    fs::write(
        dir.join("syn.json"),
        r#"{"users": 40, "samples_per_user": 5, "items": 400, "clusters": 10, "min_sequence": 20, "max_sequence": 120}"#,
    )
    .unwrap();
    fs::write(
        dir.join("train.json"),
        r#"{"source": {"synthetic": {"users": 40, "samples_per_user": 5, "items": 400, "clusters": 10,
            "min_sequence": 20, "max_sequence": 120}}, "model": {"k": 10}, "train": {"batch_size": 32}}"#,
    )
    .unwrap();
}

#[test]
fn synthesize_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_synthetic(dir.path());
    for out in ["a", "b"] {
        let o = muse(
            &["synthesize", "--config", "syn.json", "--seed", "9", "--out", out],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = read_json(dir.path().join("a/run_manifest.json"));
    let b = read_json(dir.path().join("b/run_manifest.json"));
    assert_eq!(a, b);
    assert_eq!(a["outputs"].as_object().unwrap().len(), 4);
    assert_eq!(
        fs::read(dir.path().join("a/samples.jsonl")).unwrap(),
        fs::read(dir.path().join("b/samples.jsonl")).unwrap()
    );

    // the generated files ingest cleanly
    let o = muse(
        &[
            "ingest",
            "--data",
            "a/samples.jsonl",
            "--embeddings",
            "a/embeddings.bin",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_eval_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_synthetic(dir.path());
    for out in ["t1", "t2"] {
        let o = muse(
            &["train", "--config", "train.json", "--seed", "4", "--out", out],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let c1 = fs::read(dir.path().join("t1/checkpoint.bin")).unwrap();
    assert_eq!(c1, fs::read(dir.path().join("t2/checkpoint.bin")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("t1/run_manifest.json")).unwrap(),
        fs::read(dir.path().join("t2/run_manifest.json")).unwrap()
    );

    let o = muse(
        &["train", "--config", "train.json", "--seed", "5", "--out", "t3"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert_ne!(c1, fs::read(dir.path().join("t3/checkpoint.bin")).unwrap());

    fs::write(
        dir.path().join("eval.json"),
        r#"{"checkpoint": "t1/checkpoint.bin", "seed": 4,
            "source": {"synthetic": {"users": 40, "samples_per_user": 5, "items": 400, "clusters": 10,
            "min_sequence": 20, "max_sequence": 120}}}"#,
    )
    .unwrap();
    let o = muse(&["eval", "--config", "eval.json", "--out", "e"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let preds = fs::read_to_string(dir.path().join("e/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 200);
    let r = read_json(dir.path().join("e/eval.json"));
    assert_eq!(r["records"], 200);

    // truncated checkpoint is a data error
    fs::write(dir.path().join("t1/checkpoint.bin"), &c1[..c1.len() / 2]).unwrap();
    assert_eq!(
        code(&muse(
            &["eval", "--config", "eval.json", "--out", "e2"],
            dir.path()
        )),
        3
    );
}

#[test]
fn simulate_builtin_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = muse(
        &[
            "simulate",
            "--scenario",
            "fast-fetch",
            "--seed",
            "2",
            "--trace",
            "--out",
            "s",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(dir.path().join("s/report.json"));
    assert_eq!(r["mean_exposed_prefetch_ms"], 0.0);
    assert!(r["async"]["mean_ms"].as_f64().unwrap() <= r["sync"]["mean_ms"].as_f64().unwrap());
    let csv = fs::read_to_string(dir.path().join("s/trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + r["requests"].as_u64().unwrap() as usize);

    let o = muse(
        &["simulate", "--scenario", "warp-speed", "--seed", "2"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_small_passes_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let o = muse(
        &["bench", "--seq-len", "2000", "--repetitions", "2", "--out", "b"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(dir.path().join("b/bench.json"));
    assert_eq!(r["oracle_passed"], true);
    assert_eq!(r["seq_len"], 2000);
}

#[test]
fn ablate_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("ab.json"),
        r#"{"source": {"synthetic": {"users": 30, "samples_per_user": 4, "items": 300, "clusters": 10,
            "min_sequence": 20, "max_sequence": 80}},
            "ablation": {"model": {"k": 10}, "cells": [{"gsu": "muse", "esu": "sa_ta+simtier"},
            {"gsu": "category", "esu": "ta_only"}, {"gsu": "id_similarity", "esu": "ta+simtier"}]}}"#,
    )
    .unwrap();
    let o = muse(
        &["ablate", "--config", "ab.json", "--seed", "3", "--out", "a"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("category"));
    let r = read_json(dir.path().join("a/ablation.json"));
    assert_eq!(r["cells"].as_array().unwrap().len(), 3);
}

/// Shipped configs, shrunk so they run in a moment.
#[test]
fn shipped_configs_are_valid() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("train.json", "train"),
        ("ablation.json", "ablate"),
        ("ablation_null.json", "ablate"),
        ("synthetic_small.json", "synthesize"),
        ("scenario_custom.json", "simulate"),
        ("bench.json", "bench"),
    ];
    for (name, cmd) in cases {
        let mut v = read_json(configs.join(name));
        if let Some(s) = v.pointer_mut("/source/synthetic") {
            s["users"] = 6.into();
            s["samples_per_user"] = 3.into();
        }
        match cmd {
            "synthesize" => v["users"] = 6.into(),
            "simulate" => v["config"]["stream"]["requests"] = 50.into(),
            "bench" => {
                v["seq_len"] = 500.into();
                v["repetitions"] = 1.into();
            }
            _ => {}
        }
        let path = dir.path().join(name);
        fs::write(&path, v.to_string()).unwrap();
        let out = format!("out-{name}");
        let o = muse(
            &[
                cmd,
                "--config",
                path.to_str().unwrap(),
                "--seed",
                "1",
                "--out",
                &out,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(&out).join("run_manifest.json").exists());
    }
}

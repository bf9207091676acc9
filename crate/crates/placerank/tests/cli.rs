use std::path::Path;
use std::process::{Command, Output};

use placerank::core::retrieval::{reference_geo, recall_at_k, FeatureStore};
use placerank::core::pipeline::{CORRECT_RADIUS_M, RECALL_KS};
use placerank::core::selection::Precision;
use placerank::{store_file, Config};
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_placerank"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), Config::tiny().to_toml()).unwrap();
    dir
}

const CFG: [&str; 2] = ["--config", "tiny.toml"];

fn with_cfg<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&CFG);
    v
}

/// generate, both training stages, index build and evaluation.
fn pipeline(dir: &Path) -> Value {
    ok(dir, &with_cfg(&["generate", "--out", "data"]));
    ok(dir, &with_cfg(&["train", "--data", "data", "--stage", "retrieval", "--out", "ret.r2pk", "--log", "ret.jsonl"]));
    ok(
        dir,
        &with_cfg(&["train", "--data", "data", "--stage", "rerank", "--init", "ret.r2pk", "--out", "full.r2pk"]),
    );
    ok(dir, &["build-index", "--data", "data", "--params", "full.r2pk", "--out", "test.r2fs"]);
    ok(
        dir,
        &["evaluate", "--store", "test.r2fs", "--params", "full.r2pk", "--topk", "3", "--results", "results.json"],
    )
}

#[test]
fn pipeline_is_reproducible_and_reports_provenance() {
    let (a, b) = (setup(), setup());
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    assert_eq!(ra, rb);
    assert_eq!(ra["provenance"]["seed"], 1);
    assert_eq!(ra["provenance"]["config_hash"], Config::tiny().hash());
    assert_eq!(ra["provenance"]["stages"], serde_json::json!(["retrieval", "rerank"]));
    assert_eq!(ra["retrieval"]["ks"], serde_json::json!([1, 5, 10]));
    assert!(ra["reranked"]["recall"].is_array());

    let log = std::fs::read_to_string(a.path().join("ret.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch_log"]["stage"], "retrieval");
    assert_eq!(first["config_hash"], Config::tiny().hash());

    // Recall recomputed from the written result lists matches the report.
    let store: FeatureStore = store_file::load(&a.path().join("test.r2fs")).unwrap();
    let results: Value = serde_json::from_slice(&std::fs::read(a.path().join("results.json")).unwrap()).unwrap();
    let queries = results["queries"].as_array().unwrap();
    let geo: Vec<_> = queries.iter().map(|q| store.get(q["id"].as_str().unwrap()).unwrap().geo).collect();
    for (key, field) in [("retrieval", "retrieval"), ("reranked", "reranked")] {
        let lists: Vec<Vec<String>> = queries
            .iter()
            .map(|q| q[field].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect())
            .collect();
        let rec = recall_at_k(&lists, &geo, &reference_geo(&store), &RECALL_KS, CORRECT_RADIUS_M).unwrap();
        let reported: Vec<f64> = ra[key]["recall"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(rec.recall, reported, "{key}");
    }

    // Remaining subcommands on the same artifacts.
    let dir = a.path();
    let id = queries[0]["id"].as_str().unwrap();
    let q = ok(dir, &["query", "--store", "test.r2fs", "--params", "full.r2pk", "--id", id, "--topk", "3"]);
    assert_eq!(q["retrieval"].as_array().unwrap().len(), 3);
    assert_eq!(q["reranked"].as_array().unwrap().len(), 3);
    let cands: Vec<&str> = q["retrieval"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    let rr = ok(
        dir,
        &["rerank", "--store", "test.r2fs", "--params", "full.r2pk", "--id", id, "--candidates", &cands.join(",")],
    );
    assert_eq!(rr["reranked"], q["reranked"]);

    let bench = ok(dir, &["bench", "--store", "test.r2fs", "--params", "full.r2pk", "--topk", "3"]);
    let report = &bench["report"];
    assert_eq!(report["local_bytes_f16"].as_u64().unwrap() * 2, report["local_bytes_f32"].as_u64().unwrap());
    assert_eq!(report["reference_scale"]["local_bytes_f32"], 262_000);
    assert!(report["reps"].as_u64().unwrap() >= 20);

    let img = |v: &str| format!("data/test/images/{v}.ppm");
    let refs: Vec<_> = store.references().map(|r| r.id.clone()).collect();
    let vis = ok(
        dir,
        &["visualize-attention", "--params", "full.r2pk", "--query", &img(id), "--reference", &img(&refs[0]), "--pairs", "4", "--out", "vis"],
    );
    assert!(vis["pairs"].as_array().unwrap().len() <= 4);
    assert!(dir.join("vis.ppm").exists() && dir.join("vis.json").exists());
}

#[test]
fn external_features_build_an_index() {
    let dir = setup();
    let d = dir.path();
    ok(d, &with_cfg(&["generate", "--out", "data"]));
    ok(d, &with_cfg(&["train", "--data", "data", "--stage", "retrieval", "--out", "ret.r2pk"]));
    ok(d, &["build-index", "--data", "data", "--params", "ret.r2pk", "--out", "a.r2fs"]);
    let store = store_file::load(&d.join("a.r2fs")).unwrap();
    placerank::ingest::save_features(&store, &d.join("feats"), Precision::F32).unwrap();
    ok(d, &["build-index", "--features", "feats", "--out", "b.r2fs"]);
    assert_eq!(std::fs::read(d.join("a.r2fs")).unwrap(), std::fs::read(d.join("b.r2fs")).unwrap());
    ok(d, &["build-index", "--features", "feats", "--out", "h.r2fs", "--half"]);
    assert!(std::fs::metadata(d.join("h.r2fs")).unwrap().len() < std::fs::metadata(d.join("b.r2fs")).unwrap().len());
    let eval = ok(d, &["evaluate", "--store", "h.r2fs", "--topk", "3"]);
    assert!(eval["reranked"].is_null());
}

#[test]
fn errors_and_exit_codes() {
    let dir = setup();
    let d = dir.path();
    store_file::save(&FeatureStore::new(), Precision::F32, &d.join("empty.r2fs")).unwrap();
    let out = run(d, &["query", "--store", "empty.r2fs", "--id", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty store"));

    let out = run(d, &["evaluate", "--store", "empty.r2fs", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(d, &["build-index", "--out", "x.r2fs"]).status.code(), Some(2));

    let out = run(d, &with_cfg(&["train", "--data", "nowhere", "--stage", "rerank", "--out", "x.r2pk"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("retrieval checkpoint"));

    std::fs::write(d.join("junk.r2fs"), b"R2FS\x01\x00\xff").unwrap();
    let out = run(d, &["evaluate", "--store", "junk.r2fs"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.r2fs"));

    std::fs::write(d.join("bad.toml"), "[model]\ntop_kk = 3\n").unwrap();
    let out = run(d, &["--config", "bad.toml", "generate", "--out", "g"]);
    assert_eq!(out.status.code(), Some(1));
}

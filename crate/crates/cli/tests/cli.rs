//! End-to-end runs of the `dbvae` binary on tiny splits.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dbvae::datasets::{read_dataset, read_feedback};
use dbvae::trainer::TrainingConfig;

fn dbvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbvae")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dbvae(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_a_readable_split_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["gen-data", "--family", "glyphs10", "--rule", "diag", "--n", "200", "--seed", "1", "--out", p(out)]);
    }
    let ds = read_dataset(&a).unwrap();
    assert_eq!(ds.len(), 200);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn usage_errors_exit_non_zero_with_one_line() {
    let out = dbvae(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: usage:"));

    let out = dbvae(&["gen-data", "--family", "glyphs10", "--n", "10", "--bogus", "1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_name_their_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dbvae(&["report", "--in", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");

    let missing = dir.path().join("nope");
    let out = dbvae(&["eval-grids", "--checkpoint", p(&missing), "--data", p(&missing), "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["gen-data", "make-feedback", "train", "metrics", "eval-grids", "report"] {
        let out = ok(&[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{sub}");
    }
    ok(&["--help"]);
}

#[test]
fn out_root_env_prefixes_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dbvae"))
        .args(["make-feedback", "--family", "glyphs10", "--budget", "40", "--out", "fb"])
        .env("DBVAE_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fb = read_feedback(&dir.path().join("fb")).unwrap();
    assert_eq!(fb.pool.len(), 40);
}

#[test]
fn full_pipeline_from_data_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--family", "glyphs10", "--rule", "diag", "--n", "256", "--seed", "1", "--out", p(&data.join("train"))]);
    ok(&["gen-data", "--family", "glyphs10", "--rule", "reverse", "--n", "200", "--seed", "3", "--out", p(&data.join("test"))]);
    ok(&["gen-data", "--family", "glyphs10", "--rule", "none", "--n", "300", "--seed", "4", "--out", p(&data.join("eval"))]);
    let fb = root.join("fb");
    ok(&["make-feedback", "--family", "glyphs10", "--budget", "80", "--seed", "2", "--out", p(&fb)]);

    let results = root.join("results");
    for (name, mut config) in [("proposed", TrainingConfig::proposed(0)), ("baseline", TrainingConfig::baseline(0, 4.0))] {
        config.epochs = 1;
        config.batch_size = 64;
        config.feedback_batch_size = 4;
        let cfg = root.join(format!("{name}.toml"));
        fs::write(&cfg, config.to_toml()).unwrap();
        let run = results.join(name).join("seed-0");
        ok(&["train", "--config", p(&cfg), "--data", p(&data.join("train")), "--feedback", p(&fb), "--out", p(&run)]);
        assert!(run.join("checkpoint.bin").exists() && run.join("training_log.csv").exists());
        ok(&[
            "metrics", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&run.join("metrics.json")), "--trials", "20",
        ]);
        let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
        assert!(report["factorvae_score"].as_f64().is_some());
    }

    let grids = root.join("grids");
    ok(&["eval-grids", "--checkpoint", p(&results.join("proposed/seed-0")), "--data", p(&data.join("eval")), "--out", p(&grids)]);
    for stem in ["reconstruction", "cross_product", "traversal_shape", "traversal_color", "traversal_nuisance"] {
        assert!(grids.join(format!("{stem}.png")).exists(), "{stem}");
        assert!(grids.join(format!("{stem}.json")).exists(), "{stem}");
    }

    let out = ok(&["report", "--in", p(&results)]);
    assert!(!out.stdout.is_empty());
    let agg = fs::read_to_string(results.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3);
    let mut rd = csv::Reader::from_reader(agg.as_bytes());
    let col = rd.headers().unwrap().iter().position(|h| h == "factorvae_score").unwrap();
    for rec in rd.records() {
        let rec = rec.unwrap();
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(results.join(&rec[0]).join(format!("seed-{}", &rec[1])).join("metrics.json")).unwrap())
                .unwrap();
        assert_eq!(rec[col].parse::<f64>().unwrap(), json["factorvae_score"].as_f64().unwrap());
    }
    assert!(results.join("plots").is_dir());
    let svgs = fs::read_dir(results.join("plots")).unwrap().count();
    assert!(svgs >= 2);
}

#[test]
fn shipped_configs_match_the_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let load = |name: &str| TrainingConfig::from_toml(&fs::read_to_string(dir.join(name)).unwrap()).unwrap();
    assert_eq!(load("proposed.toml"), TrainingConfig::proposed(0));
    assert_eq!(load("no_labels.toml"), TrainingConfig::no_labels(0));
    assert_eq!(load("baseline.toml"), TrainingConfig::baseline(0, 4.0));
}

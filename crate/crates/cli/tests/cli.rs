use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmedl::metrics::separability::read_feature_table;
use serde_json::json;

fn cmedl(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmedl"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_pairs(o: &Output) -> BTreeMap<String, String> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .flat_map(|l| l.split(' '))
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config(dir: &Path) {
    let cfg = json!({
        "version": 1,
        "seed": 4,
        "phantom": {"image_size": 32, "n_cbct": 14, "n_mri": 6, "n_cbct_val": 2, "n_cbct_test": 6,
                    "tumor_radius_range": [3.0, 6.0]},
        "train": {"preset": "tiny", "max_epochs": 2, "max_steps_per_epoch": 3, "replay_pool": 4},
        "metrics": {"dropout_runs": 3, "separability_per_class": 20},
        "paths": {"data_dir": "data", "out_dir": "runs"}
    });
    fs::write(dir.join("run.json.cfg"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmedl(dir.path(), &["--config", "nope.json", "generate-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.json"), r#"{"version": 1, "tau": 3}"#).unwrap();
    let o = cmedl(dir.path(), &["--config", "bad.json", "generate-data"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::write(dir.path().join("v2.json"), r#"{"version": 2}"#).unwrap();
    assert_eq!(cmedl(dir.path(), &["--config", "v2.json", "generate-data"]).status.code(), Some(2));

    let o = cmedl(dir.path(), &["train", "--mode", "cmedl_plus"]);
    assert_eq!(o.status.code(), Some(2));
    for m in ["cmedl", "cbct_only", "pmri_seg", "cbct_plus_pmri"] {
        assert!(stderr(&o).contains(m), "{}", stderr(&o));
    }

    let o = cmedl(dir.path(), &["sensitivity", "--checkpoint", "missing", "--runs", "1", "--out", "s"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("runs < 2"), "{}", stderr(&o));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmedl(dir.path(), &["default-config"]);
    assert!(o.status.success());
    fs::write(dir.path().join("d.json"), &o.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics"]["tau_mm"], 4.38);
    assert_eq!(v["metrics"]["dropout_runs"], 10);
    assert_eq!(v["train"]["batch_size"], 2);
    assert_eq!(v["train"]["max_epochs"], 100);
    let again = cmedl(dir.path(), &["--config", "d.json", "default-config"]);
    assert!(again.status.success());
}

#[test]
fn generate_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    smoke_config(dir.path());
    let a = cmedl(dir.path(), &["--config", "run.json.cfg", "generate-data", "--out", "a"]);
    let b = cmedl(dir.path(), &["--config", "run.json.cfg", "generate-data", "--out", "b"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let (pa, pb) = (stdout_pairs(&a), stdout_pairs(&b));
    assert!(dir.path().join(&pa["manifest"]).exists());
    assert_eq!(pa["cases"], "20");
    assert_eq!(pa["corpus_sha256"], pb["corpus_sha256"]);
    assert!(dir.path().join("a/run.json").exists());
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    smoke_config(w);
    let c = ["--config", "run.json.cfg"];
    let run = |args: &[&str]| {
        let o = cmedl(w, &[&c[..], args].concat());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout_pairs(&o)
    };
    run(&["generate-data"]);

    let t0 = std::time::Instant::now();
    let train = run(&["train", "--mode", "cmedl", "--out", "runs/cm", "--gnuplot-hints"]);
    assert!(t0.elapsed().as_secs() < 300);
    let best: usize = train["best_epoch"].parse().unwrap();
    assert!((1..=2).contains(&best));
    let dice: f64 = train["val_dice"].parse().unwrap();
    assert!((0.0..=1.0).contains(&dice));
    assert!(train.contains_key("gnuplot"));
    for f in ["runs/cm/run.json", "runs/cm/loss_curve.csv", "runs/cm/epochs.csv", "runs/cm/best/checkpoint.json"] {
        assert!(w.join(f).exists(), "{f}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join("runs/cm/run.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["train"]["seed"], 4);
    assert_eq!(record["input_hash"].as_str().unwrap().len(), 64);

    run(&["train", "--mode", "cbct_only", "--out", "runs/cb"]);

    let one = run(&["evaluate", "--method", "cmedl=runs/cm/best", "--out", "eval1"]);
    let rows = fs::read_to_string(w.join(&one["cases_csv"])).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);
    let two = run(&["evaluate", "--method", "cmedl=runs/cm/best", "--method", "cbct_only=runs/cb/best", "--out", "eval2"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join(&two["summary_json"])).unwrap()).unwrap();
    assert_eq!(summary["p_values"]["dsc"]["holm"].as_array().unwrap().len(), 2);
    assert!(summary["per_method"]["cmedl"]["kl"].is_number());
    assert!(two.contains_key("dsc.cbct_only"));

    let tr = run(&["translate", "--checkpoint", "runs/cm/best", "--out", "pmri"]);
    assert_eq!(tr["written"], "6");
    assert!(tr.contains_key("kl_pmri"));
    let sg = run(&["segment", "--checkpoint", "runs/cm/best", "--out", "masks"]);
    assert_eq!(sg["written"], "6");
    assert_eq!(sg["segment_mode"], "student");

    let s = run(&["sensitivity", "--checkpoint", "runs/cm/best", "--runs", "2", "--out", "sens"]);
    assert!(s["msd"].parse::<f64>().unwrap() >= 0.0);
    let csv = fs::read_to_string(w.join("sens/sensitivity_cases.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "case_id,sd,dsc_run0,dsc_run1");

    let f = run(&["export-features", "--checkpoint", "runs/cm/best", "--out", "feat"]);
    let (header, records) = read_feature_table(&w.join(&f["features"])).unwrap();
    assert_eq!(records.len().to_string(), f["records"]);
    assert_eq!(header.case_ids.len().to_string(), f["scored_cases"]);
    assert!(f["silhouette_mean"].parse::<f64>().unwrap().abs() <= 1.0);

    // A checkpoint whose metadata names another format is a spec mismatch.
    let meta = w.join("runs/cm/best/checkpoint.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta).unwrap()).unwrap();
    v["format_version"] = json!(999);
    fs::write(&meta, v.to_string()).unwrap();
    let o = cmedl(w, &[&c[..], &["segment", "--checkpoint", "runs/cm/best", "--out", "m2"]].concat());
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let o = cmedl(w, &[&c[..], &["segment", "--checkpoint", "runs/none", "--out", "m3"]].concat());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

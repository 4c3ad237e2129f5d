//! End-to-end command tests over tiny datasets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_winnorm")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn winnorm")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_tiny_data(dir: &Path, seed: u64, extra: &[&str]) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    let mut args = vec![
        "gen-data".to_string(),
        "--out".into(),
        data.display().to_string(),
        "--seed".into(),
        seed.to_string(),
        "--n-per-class".into(),
        "12".into(),
        "--n-test-per-class".into(),
        "6".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let out = Command::new(bin()).args(&args).output().unwrap();
    assert_ok(&out);
    data
}

fn write_config(dir: &Path, data: &Path, out_dir: &Path, kind: &str, trainer: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "run_id": format!("{kind}_{trainer}"),
        "data": data.display().to_string(),
        "train_site": "A",
        "out": out_dir.display().to_string(),
        "norm": {"kind": kind, "affine": kind == "BN"},
        "model": {"num_classes": 4, "init_seed": 1, "stage_channels": [8, 16]},
        "train": {
            "epochs": 2, "batch_size": 32, "base_lr": 0.1, "warmup_epochs": 1,
            "seed": 1, "trainer": trainer
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn dir_digest(dir: &Path) -> Vec<(String, String)> {
    let mut entries: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let bytes = std::fs::read(e.path()).unwrap();
            (e.file_name().to_string_lossy().to_string(), winnorm::data::sha256_hex(&bytes))
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn gen_data_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_tiny_data(dir.path(), 7, &[]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["sites"].as_array().unwrap().len(), 5);

    let b_dir = tempfile::tempdir().unwrap();
    let b = gen_tiny_data(b_dir.path(), 7, &[]);
    assert_eq!(dir_digest(&a), dir_digest(&b), "same seed must give byte-identical datasets");
}

#[test]
fn gen_data_single_site_and_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 9, &["--sites", "A", "--binary"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["sites"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 2);
}

#[test]
fn train_smoke_writes_every_artifact_and_override_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 11, &[]);
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &out_dir, "BN", "single_pass");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "norm.kind=WIN",
        "--override",
        "norm.tau=0.9",
        "--override",
        "norm.affine=false",
    ]);
    assert_ok(&out);

    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.echo.json")).unwrap())
            .unwrap();
    assert_eq!(echo["norm"]["kind"], "WIN");
    assert_eq!(echo["norm"]["tau"], 0.9);

    for file in ["run_record.csv", "metrics.csv", "metrics.json", "summary.json"] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }
    assert!(out_dir.join("checkpoint/manifest.json").exists());

    let record = std::fs::read_to_string(out_dir.join("run_record.csv")).unwrap();
    assert_eq!(record.lines().count(), 3, "header + one row per epoch");
}

#[test]
fn win_win_with_batch_norm_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 13, &["--sites", "A,B"]);
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &out_dir, "BN", "win_win");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("window normalization"), "stderr: {stderr}");
}

#[test]
fn eval_reproduces_the_final_run_record_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 17, &[]);
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &out_dir, "IN", "single_pass");
    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap()]));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    let recorded = summary["final_epoch"]["ind_accuracy"].as_f64().unwrap();

    let eval_out = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--splits",
        "A,B,C,D,E",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("summary.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    let ind = rows
        .iter()
        .find(|r| r["metric"] == "accuracy" && r["dataset"] == "ind:A")
        .expect("ind row");
    assert_eq!(ind["value"].as_f64().unwrap(), recorded, "eval must reproduce the final row");
    // 4 OOD accuracy rows plus the summary mean.
    let ood_rows = rows
        .iter()
        .filter(|r| r["metric"] == "accuracy" && r["dataset"] != "ind:A")
        .count();
    assert_eq!(ood_rows, 4);
    assert!(rows.iter().any(|r| r["metric"] == "mean_ood_accuracy"));
}

#[test]
fn eval_corruption_grid_has_25_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 19, &["--sites", "A"]);
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &out_dir, "IN", "single_pass");
    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap()]));
    let eval_out = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--splits",
        "A",
        "--corruptions",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("summary.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    let grid = rows
        .iter()
        .filter(|r| r["dataset"].as_str().unwrap_or("").starts_with("corrupt:"))
        .count();
    assert_eq!(grid, 25);
    assert!(rows.iter().any(|r| r["metric"] == "mean_corruption_error"));
}

#[test]
fn eval_missing_split_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 23, &["--sites", "A"]);
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &out_dir, "IN", "single_pass");
    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap()]));
    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--splits",
        "Z",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_grid_writes_tidy_and_summary_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 29, &[]);
    let base = serde_json::json!({
        "data": data.display().to_string(),
        "train_site": "A",
        "out": dir.path().join("ignored").display().to_string(),
        "norm": {"kind": "WIN"},
        "model": {"num_classes": 4, "init_seed": 1, "stage_channels": [8, 16]},
        "train": {"epochs": 1, "batch_size": 32, "base_lr": 0.1, "warmup_epochs": 1, "seed": 1, "trainer": "single_pass"}
    });
    let matrix = serde_json::json!({"methods": ["BN", "WIN"], "base": base});
    let matrix_path = dir.path().join("matrix.json");
    std::fs::write(&matrix_path, matrix.to_string()).unwrap();
    let out_dir = dir.path().join("cmp");
    let out = run(&[
        "compare",
        "--matrix",
        matrix_path.to_str().unwrap(),
        "--seeds",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let summary_csv = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    // Single seed: the std column is exactly zero.
    for line in summary_csv.lines().skip(1) {
        let std_col: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(std_col, 0.0);
    }
    assert!(summary_csv.lines().any(|l| l.starts_with("BN,")));
    assert!(summary_csv.lines().any(|l| l.starts_with("WIN,")));
    let tidy = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(tidy.lines().next().unwrap().starts_with("run_id,seed,metric,dataset,value"));
    assert!(out_dir.join("cells/BN_s1/summary.json").exists());
    assert!(out_dir.join("cells/WIN_s1/summary.json").exists());
}

#[test]
fn compare_with_worker_processes_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 31, &["--sites", "A,B"]);
    let base = serde_json::json!({
        "data": data.display().to_string(),
        "train_site": "A",
        "out": dir.path().join("ignored").display().to_string(),
        "norm": {"kind": "WIN"},
        "model": {"num_classes": 4, "init_seed": 1, "stage_channels": [8]},
        "train": {"epochs": 1, "batch_size": 32, "base_lr": 0.1, "warmup_epochs": 1, "seed": 1, "trainer": "single_pass"}
    });
    let matrix = serde_json::json!({"methods": ["WIN"], "base": base});
    let matrix_path = dir.path().join("matrix.json");
    std::fs::write(&matrix_path, matrix.to_string()).unwrap();

    let seq = dir.path().join("cmp_seq");
    let par = dir.path().join("cmp_par");
    assert_ok(&run(&["compare", "--matrix", matrix_path.to_str().unwrap(), "--seeds", "2", "--out", seq.to_str().unwrap()]));
    assert_ok(&run(&[
        "compare", "--matrix", matrix_path.to_str().unwrap(), "--seeds", "2",
        "--out", par.to_str().unwrap(), "--jobs", "2",
    ]));
    let read = |p: &Path| std::fs::read_to_string(p.join("summary.csv")).unwrap();
    assert_eq!(read(&seq), read(&par), "worker processes must not change results");
}

#[test]
fn bench_windows_reports_and_rejects_zero_steps() {
    let out = run(&["bench-windows", "--steps", "50", "--epochs", "5"]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!(report["online_median_secs"].as_f64().unwrap() > 0.0);
    assert!(report["offline_median_secs"].as_f64().unwrap() > 0.0);

    let bad = run(&["bench-windows", "--steps", "0"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn binary_auc_pipeline_with_reference_recalibration() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 37, &["--binary", "--sites", "A,B"]);
    let out_dir = dir.path().join("run");
    let cfg_path = dir.path().join("config.json");
    let cfg = serde_json::json!({
        "run_id": "binary_smoke",
        "data": data.display().to_string(),
        "train_site": "A",
        "out": out_dir.display().to_string(),
        "norm": {"kind": "IN"},
        "model": {"num_classes": 2, "init_seed": 1, "stage_channels": [8, 16]},
        "train": {"epochs": 2, "batch_size": 16, "base_lr": 0.1, "warmup_epochs": 1, "seed": 3, "trainer": "single_pass"}
    });
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    assert_ok(&run(&["train", "--config", cfg_path.to_str().unwrap()]));

    // Evaluate, then recalibrate against itself: m-cAUC must be 1.
    let eval_out = dir.path().join("eval");
    assert_ok(&run(&[
        "eval",
        "--checkpoint", out_dir.join("checkpoint").to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--splits", "A,B",
        "--out", eval_out.to_str().unwrap(),
    ]));
    let self_ref = dir.path().join("eval_selfref");
    assert_ok(&run(&[
        "eval",
        "--checkpoint", out_dir.join("checkpoint").to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--splits", "A,B",
        "--reference", eval_out.join("summary.json").to_str().unwrap(),
        "--out", self_ref.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(self_ref.join("summary.json")).unwrap())
            .unwrap();
    let mc = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["metric"] == "m_cauc")
        .expect("m_cauc row");
    assert_eq!(mc["value"].as_f64().unwrap(), 1.0);
}

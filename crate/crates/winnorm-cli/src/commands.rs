//! Implementations behind the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use winnorm::data::{
    corrupt_split, gen_benchmark, read_dataset, write_dataset, CorruptionSpec, SeverityTables,
    ShapeBench, CORRUPTION_KINDS,
};
use winnorm::error::{Error, Result};
use winnorm::metrics::{m_cauc, mean_corruption_error, MetricReport};
use winnorm::model::{build_model, Model};
use winnorm::norm::{NormConfig, NormKind};
use winnorm::train::{evaluate_split, train, DataBundle, EpochRecord, TrainerKind};

use crate::config::RunConfigFile;

pub fn short_digest(body: &str) -> String {
    winnorm::data::sha256_hex(body.as_bytes())[..12].to_string()
}

/// Assemble the single-source protocol: train on one site, validate on
/// its held-out split, test on every other site.
pub fn bundle_for_site(bench: &ShapeBench, train_site: &str) -> Result<DataBundle> {
    let site = bench
        .site(train_site)
        .ok_or_else(|| Error::InvalidConfig(format!("site {train_site} not in dataset")))?;
    let mut ood = BTreeMap::new();
    for s in &bench.sites {
        if s.site != train_site {
            ood.insert(s.site.clone(), s.test.clone());
        }
    }
    Ok(DataBundle {
        train: site.train.clone(),
        ind_name: train_site.to_string(),
        ind_val: site.test.clone(),
        ood,
        num_classes: bench.num_classes(),
    })
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(
    out: &Path,
    seed: u64,
    sites: &[String],
    n_per_class: usize,
    n_test_per_class: usize,
    binary: bool,
) -> Result<()> {
    let bench = gen_benchmark(seed, sites, n_per_class, n_test_per_class, binary)?;
    write_dataset(out, &bench)?;
    // Re-read to prove the manifest and checksums validate.
    let back = read_dataset(out)?;
    println!(
        "wrote {} sites x ({} train / {} test) to {} (classes: {:?})",
        back.sites.len(),
        back.sites[0].train.len(),
        back.sites[0].test.len(),
        out.display(),
        back.classes,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub train_site: String,
    pub trainer: TrainerKind,
    pub norm_kind: NormKind,
    pub final_epoch: EpochRecord,
    pub mean_ood_accuracy: Option<f64>,
    pub wall_secs: f64,
}

pub fn cmd_train(cfg: &RunConfigFile) -> Result<RunSummary> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(cfg.out.display().to_string(), e))?;

    let echo = serde_json::to_string_pretty(cfg)?;
    let digest = short_digest(&echo);
    std::fs::write(cfg.out.join("config.echo.json"), &echo)
        .map_err(|e| Error::io(cfg.out.display().to_string(), e))?;

    let bench = read_dataset(&cfg.data)?;
    let data = bundle_for_site(&bench, &cfg.train_site)?;
    let spec = cfg.model.to_cnn_spec(&cfg.norm)?;
    if spec.num_classes != bench.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "model has {} classes, dataset has {}",
            spec.num_classes,
            bench.num_classes()
        )));
    }
    let mut model = build_model::<f32>(&spec)?;

    let record = match train(&mut model, &data, &cfg.train) {
        Ok(r) => r,
        Err(Error::NumericalAbort { epoch, step, lr, detail, diagnostics }) => {
            let body = serde_json::to_string_pretty(&diagnostics)?;
            let _ = std::fs::write(cfg.out.join("diagnostics.json"), body);
            return Err(Error::NumericalAbort { epoch, step, lr, detail, diagnostics });
        }
        Err(e) => return Err(e),
    };

    record.write_csv(&cfg.out.join("run_record.csv"))?;

    let run_id = cfg.run_id();
    let mut report = MetricReport::new(run_id.clone(), cfg.train.seed, digest.clone());
    let last = record.final_epoch().expect("at least one epoch").clone();
    report.push("accuracy", format!("ind:{}", cfg.train_site), last.ind_accuracy);
    if let Some(auc) = last.ind_auc {
        report.push("auc", format!("ind:{}", cfg.train_site), auc);
    }
    for (site, acc) in &last.ood_accuracy {
        report.push("accuracy", site.clone(), *acc);
    }
    for (site, auc) in &last.ood_auc {
        report.push("auc", site.clone(), *auc);
    }
    if let Some(m) = record.mean_ood_accuracy() {
        report.push("mean_ood_accuracy", "ood", m);
    }
    let metrics_path = cfg.out.join("metrics.csv");
    let _ = std::fs::remove_file(&metrics_path);
    report.append_csv(&metrics_path)?;
    report.write_json(&cfg.out.join("metrics.json"))?;

    let summary = RunSummary {
        run_id,
        seed: cfg.train.seed,
        config_digest: digest,
        train_site: cfg.train_site.clone(),
        trainer: cfg.train.trainer,
        norm_kind: cfg.norm.kind,
        final_epoch: last,
        mean_ood_accuracy: record.mean_ood_accuracy(),
        wall_secs: start.elapsed().as_secs_f64(),
    };
    std::fs::write(cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(cfg.out.display().to_string(), e))?;

    model.save_checkpoint(
        &cfg.out.join("checkpoint"),
        cfg.train.epochs,
        serde_json::json!({
            "run_id": summary.run_id,
            "seed": cfg.train.seed,
            "train_site": cfg.train_site,
            "config_digest": summary.config_digest,
            "final_ind_accuracy": summary.final_epoch.ind_accuracy,
        }),
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    splits: &[String],
    corruptions: bool,
    reference: Option<&Path>,
    out: &Path,
) -> Result<MetricReport> {
    let (mut model, _epoch, extra) = Model::load_checkpoint(checkpoint)?;
    let bench = read_dataset(data)?;
    if model.spec.num_classes != bench.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint classifies {} classes, dataset has {}",
            model.spec.num_classes,
            bench.num_classes()
        )));
    }
    let (h, w) = model.spec.input_dims;
    let sample = &bench.sites[0].test.images;
    if (sample.h(), sample.w()) != (h, w) || sample.c() != model.spec.in_channels {
        return Err(Error::InvalidConfig("checkpoint and dataset image shapes differ".into()));
    }

    let train_site = extra["train_site"].as_str().unwrap_or("").to_string();
    let seed = extra["seed"].as_u64().unwrap_or(0);
    let run_id = extra["run_id"].as_str().unwrap_or("eval").to_string();
    let digest = extra["config_digest"].as_str().unwrap_or("").to_string();

    let mut report = MetricReport::new(format!("{run_id}/eval"), seed, digest);
    for split in splits {
        let site = bench
            .site(split)
            .ok_or_else(|| Error::InvalidConfig(format!("missing split {split}")))?;
        let (acc, auc) = evaluate_split(&mut model, &site.test, 250)?;
        let dataset = if *split == train_site { format!("ind:{split}") } else { split.clone() };
        report.push("accuracy", dataset.clone(), acc);
        if let Some(a) = auc {
            report.push("auc", dataset, a);
        }
    }
    let ood: Vec<f64> = splits
        .iter()
        .filter(|s| **s != train_site)
        .filter_map(|s| report.get("accuracy", s))
        .collect();
    if !ood.is_empty() {
        report.push("mean_ood_accuracy", "ood", ood.iter().sum::<f64>() / ood.len() as f64);
    }

    if let Some(ref_path) = reference {
        let body = std::fs::read_to_string(ref_path)
            .map_err(|e| Error::io(ref_path.display().to_string(), e))?;
        let ref_report: MetricReport = serde_json::from_str(&body)?;
        report.push("m_cauc", "all", m_cauc_from_reports(&report, &ref_report)?);
    }

    if corruptions {
        let site_name = if train_site.is_empty() { &bench.sites[0].site } else { &train_site };
        let site = bench
            .site(site_name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing split {site_name}")))?;
        let tables_path = data.join("corruptions.json");
        let tables = if tables_path.exists() {
            SeverityTables::read_json(&tables_path)?
        } else {
            SeverityTables::default()
        };
        let mut grid: Vec<Vec<f64>> = Vec::new();
        for kind in CORRUPTION_KINDS {
            let mut row = Vec::new();
            for severity in 1..=5u8 {
                let spec = CorruptionSpec { kind, severity };
                let corrupted = corrupt_split(&site.test, spec, &tables, bench.seed)?;
                let (acc, _) = evaluate_split(&mut model, &corrupted, 250)?;
                report.push(
                    "accuracy",
                    format!("corrupt:{}:{}", serde_json::to_value(kind)?.as_str().unwrap(), severity),
                    acc,
                );
                row.push(acc);
            }
            grid.push(row);
        }
        report.push("mean_corruption_error", format!("ind:{site_name}"), mean_corruption_error(&grid)?);
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let metrics_path = out.join("metrics.csv");
    let _ = std::fs::remove_file(&metrics_path);
    report.append_csv(&metrics_path)?;
    report.write_json(&out.join("summary.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareMatrix {
    pub methods: Vec<String>,
    pub base: RunConfigFile,
}

fn method_config(base: &RunConfigFile, method: &str, seed: u64, out: PathBuf) -> Result<RunConfigFile> {
    let mut cfg = base.clone();
    cfg.run_id = Some(format!("{method}_s{seed}"));
    cfg.out = out;
    cfg.train.seed = seed;
    cfg.model.init_seed = seed;
    match method {
        "BN" => {
            cfg.norm = NormConfig { kind: NormKind::Batch, affine: true, ..base.norm.clone() };
            cfg.train.trainer = TrainerKind::SinglePass;
        }
        "IN" => {
            cfg.norm = NormConfig { kind: NormKind::Instance, affine: false, ..base.norm.clone() };
            cfg.train.trainer = TrainerKind::SinglePass;
        }
        "WIN" => {
            cfg.norm = NormConfig { kind: NormKind::Win, affine: false, ..base.norm.clone() };
            cfg.train.trainer = TrainerKind::SinglePass;
        }
        "WIN-WIN" => {
            cfg.norm = NormConfig { kind: NormKind::Win, affine: false, ..base.norm.clone() };
            cfg.train.trainer = TrainerKind::WinWin;
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown method {other}; expected BN, IN, WIN or WIN-WIN"
            )))
        }
    }
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
pub struct CompareCell {
    pub method: String,
    pub seed: u64,
    pub status: String,
    pub out: PathBuf,
}

#[derive(Serialize, Deserialize)]
pub struct CompareSummary {
    pub cells: Vec<CompareCell>,
    /// method -> metric/dataset -> (mean, std, count).
    pub table: BTreeMap<String, BTreeMap<String, (f64, f64, usize)>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run the full method x seed grid. Failed cells are recorded and the
/// grid continues; the summary is built from the cells that finished.
pub fn cmd_compare(matrix_path: &Path, seeds: u64, out: &Path, jobs: usize) -> Result<CompareSummary> {
    if seeds == 0 {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    let body = std::fs::read_to_string(matrix_path)
        .map_err(|e| Error::io(matrix_path.display().to_string(), e))?;
    let matrix: CompareMatrix = serde_json::from_str(&body)?;
    if matrix.methods.is_empty() {
        return Err(Error::InvalidConfig("matrix lists no methods".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let mut cell_cfgs = Vec::new();
    for method in &matrix.methods {
        for seed in 1..=seeds {
            let cell_out = out.join("cells").join(format!("{method}_s{seed}"));
            cell_cfgs.push((method.clone(), seed, method_config(&matrix.base, method, seed, cell_out)?));
        }
    }

    let mut cells = Vec::new();
    if jobs <= 1 {
        for (method, seed, cfg) in &cell_cfgs {
            let status = match cmd_train(cfg) {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("failed: {e}"),
            };
            cells.push(CompareCell {
                method: method.clone(),
                seed: *seed,
                status,
                out: cfg.out.clone(),
            });
        }
    } else {
        // Worker processes: each cell is fully isolated.
        let exe = std::env::current_exe()
            .map_err(|e| Error::io("current_exe".to_string(), e))?;
        let mut pending = std::collections::VecDeque::from(cell_cfgs.clone());
        let mut running: Vec<(String, u64, PathBuf, std::process::Child)> = Vec::new();
        loop {
            while running.len() < jobs {
                let Some((method, seed, cfg)) = pending.pop_front() else { break };
                std::fs::create_dir_all(&cfg.out)
                    .map_err(|e| Error::io(cfg.out.display().to_string(), e))?;
                let cfg_path = cfg.out.join("config.json");
                std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)
                    .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
                let child = std::process::Command::new(&exe)
                    .arg("train")
                    .arg("--config")
                    .arg(&cfg_path)
                    .stdout(std::process::Stdio::null())
                    .stderr(std::process::Stdio::piped())
                    .spawn()
                    .map_err(|e| Error::io(exe.display().to_string(), e))?;
                running.push((method, seed, cfg.out.clone(), child));
            }
            if running.is_empty() {
                break;
            }
            let (method, seed, cell_out, child) = running.remove(0);
            let output = child
                .wait_with_output()
                .map_err(|e| Error::io("wait".to_string(), e))?;
            let status = if output.status.success() {
                "ok".to_string()
            } else {
                format!("failed: exit {:?}", output.status.code())
            };
            cells.push(CompareCell { method, seed, status, out: cell_out });
        }
        cells.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));
    }

    // Tidy long-form CSV across cells, then the mean +- std table.
    let metrics_path = out.join("metrics.csv");
    let _ = std::fs::remove_file(&metrics_path);
    let mut by_method: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for cell in &cells {
        if cell.status != "ok" {
            continue;
        }
        let body = std::fs::read_to_string(cell.out.join("metrics.json"))
            .map_err(|e| Error::io(cell.out.display().to_string(), e))?;
        let report: MetricReport = serde_json::from_str(&body)?;
        report.append_csv(&metrics_path)?;
        for row in &report.rows {
            by_method
                .entry(cell.method.clone())
                .or_default()
                .entry(format!("{}/{}", row.metric, row.dataset))
                .or_default()
                .push(row.value);
        }
    }
    let mut table = BTreeMap::new();
    let mut summary_csv = String::from("method,metric,mean,std,runs\n");
    for (method, metrics) in &by_method {
        let mut row = BTreeMap::new();
        for (name, values) in metrics {
            let (mean, std) = mean_std(values);
            row.insert(name.clone(), (mean, std, values.len()));
            summary_csv.push_str(&format!("{method},{name},{mean},{std},{}\n", values.len()));
        }
        table.insert(method.clone(), row);
    }
    std::fs::write(out.join("summary.csv"), summary_csv)
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    let summary = CompareSummary { cells, table };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(summary)
}

/// Recalibrated mean AUC of a model's per-site AUCs against a reference
/// run's (both read from eval summaries).
pub fn m_cauc_from_reports(model: &MetricReport, reference: &MetricReport) -> Result<f64> {
    let collect = |r: &MetricReport| -> BTreeMap<String, f64> {
        r.rows
            .iter()
            .filter(|row| row.metric == "auc")
            .map(|row| (row.dataset.trim_start_matches("ind:").to_string(), row.value))
            .collect()
    };
    m_cauc(&collect(model), &collect(reference))
}

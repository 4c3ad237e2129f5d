//! Evaluation metrics and the metric report files.
//!
//! AUC is the rank-based (Mann-Whitney) statistic with ties counted one
//! half. The recalibrated mean AUC divides each dataset's AUC by a
//! reference model's AUC on the same dataset before averaging, which
//! corrects for per-dataset difficulty. Corruption robustness is the
//! plain mean of (1 - accuracy) over a corruption x severity grid.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to the label.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::shape("accuracy", format!("{} vs {}", pred.len(), labels.len())));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Rank-based AUC with the half-tie convention: the probability that a
/// random positive scores above a random negative, ties counting 1/2.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::degenerate("auc", "non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::degenerate("auc", "both classes must be present"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks across tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean over datasets of `auc_model(d) / auc_reference(d)`. The key sets
/// must match and every reference value must be positive.
pub fn m_cauc(model: &BTreeMap<String, f64>, reference: &BTreeMap<String, f64>) -> Result<f64> {
    if model.is_empty() {
        return Err(Error::degenerate("m_cauc", "no datasets"));
    }
    if model.len() != reference.len() {
        return Err(Error::InvalidConfig(format!(
            "m_cauc key mismatch: {} model vs {} reference datasets",
            model.len(),
            reference.len()
        )));
    }
    let mut acc = 0.0;
    for (name, &value) in model {
        let r = reference
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("m_cauc missing reference for {name}")))?;
        if *r <= 0.0 {
            return Err(Error::degenerate("m_cauc", format!("reference for {name} is {r}")));
        }
        acc += value / r;
    }
    Ok(acc / model.len() as f64)
}

/// Mean of (1 - accuracy) over every (corruption, severity) cell.
pub fn mean_corruption_error(acc: &[Vec<f64>]) -> Result<f64> {
    if acc.is_empty() || acc.iter().any(|row| row.is_empty()) {
        return Err(Error::degenerate("mean_corruption_error", "empty grid"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for row in acc {
        for &a in row {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::degenerate("mean_corruption_error", format!("accuracy {a} outside [0, 1]")));
            }
            total += 1.0 - a;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One metric value for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub dataset: String,
    pub value: f64,
}

/// All metrics of one run with its provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(run_id: impl Into<String>, seed: u64, config_digest: impl Into<String>) -> Self {
        MetricReport {
            run_id: run_id.into(),
            seed,
            config_digest: config_digest.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: impl Into<String>, dataset: impl Into<String>, value: f64) {
        self.rows.push(MetricRow { metric: metric.into(), dataset: dataset.into(), value });
    }

    pub fn get(&self, metric: &str, dataset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.dataset == dataset)
            .map(|r| r.value)
    }

    /// Append rows to a long-form CSV `run_id,seed,metric,dataset,value`,
    /// writing the header when the file does not exist yet.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = String::new();
        if fresh {
            out.push_str("run_id,seed,metric,dataset,value\n");
        }
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.run_id, self.seed, row.metric, row.dataset, row.value
            ));
        }
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// JSON mirror of the same report.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

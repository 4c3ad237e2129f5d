//! Training loops: SGD with Nesterov momentum and a warmup + cosine
//! learning-rate schedule, the standard single-pass trainer, and the
//! twice-forward consistency trainer that pairs a perturbed-statistics
//! pass with a global-statistics pass under one objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, SplitData};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics;
use crate::model::{BoundParams, Model, NoDraws, Param};
use crate::norm::{CachedRandomness, Mode, NormKind, NormRandomness, OnlineRandomness};
use crate::rng::RunStreams;
use crate::tape::Tape;
use crate::tensor::Real;
use crate::window::{cache_epoch, Strategy, WindowCache};

/// Which training loop to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    SinglePass,
    WinWin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
    pub seed: u64,
    pub trainer: TrainerKind,
    /// Treat the global-statistics pass as a frozen teacher.
    #[serde(default)]
    pub stop_grad_second_pass: bool,
    #[serde(default = "d_true")]
    pub augment: bool,
    /// Pre-draw each epoch's window parameters instead of sampling
    /// per step. Identical draws, amortized generation cost.
    #[serde(default)]
    pub offline_windows: bool,
}

fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    3e-3
}
fn d_warmup() -> usize {
    5
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    1e-5
}
fn d_delta() -> f64 {
    0.3
}
fn d_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.delta < 0.0 {
            return Err(Error::InvalidConfig("lr, weight decay and delta must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear ramp over the warmup epochs,
/// then cosine decay that reaches exactly zero on the final step.
pub fn lr_at(cfg: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let total = cfg.epochs * steps_per_epoch;
    if total == 0 {
        return 0.0;
    }
    let warmup = (cfg.warmup_epochs * steps_per_epoch).min(total.saturating_sub(1));
    if step < warmup {
        return cfg.base_lr * (step + 1) as f64 / warmup as f64;
    }
    let decay_steps = total - warmup;
    let t = (step - warmup + 1) as f64 / decay_steps as f64;
    if t >= 1.0 {
        return 0.0;
    }
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Per-parameter velocity buffers for Nesterov momentum.
pub struct SgdState<T: Real> {
    velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        SgdState { velocity: params.iter().map(|p| vec![T::ZERO; p.tensor.len()]).collect() }
    }
}

/// One Nesterov step: the L2 term folds into the gradient, then
/// `v <- m v + g` and `p <- p - lr (g + m v)`.
pub fn sgd_step<T: Real>(
    params: &mut [Param<T>],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let lr = T::from_f64(lr);
    let m = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    for (param, vel) in params.iter_mut().zip(&mut state.velocity) {
        let grad = param.tensor.grad.take().ok_or_else(|| {
            Error::InvalidConfig(format!("parameter {} has no gradient", param.name))
        })?;
        if grad.len() != vel.len() {
            return Err(Error::shape("sgd_step", format!("grad len for {}", param.name)));
        }
        for ((p, v), &g0) in param.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
            let g = g0 + wd * *p;
            *v = m * *v + g;
            *p = *p - lr * (g + m * *v);
        }
        param.tensor.grad = Some(grad);
    }
    Ok(())
}

/// Per-epoch observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub jsd_loss: f64,
    pub lr_last: f64,
    pub ind_accuracy: f64,
    pub ind_auc: Option<f64>,
    pub ood_accuracy: BTreeMap<String, f64>,
    pub ood_auc: BTreeMap<String, f64>,
}

/// The whole run, serializable to CSV and JSON.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn mean_ood_accuracy(&self) -> Option<f64> {
        let last = self.final_epoch()?;
        if last.ood_accuracy.is_empty() {
            return None;
        }
        Some(last.ood_accuracy.values().sum::<f64>() / last.ood_accuracy.len() as f64)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut ood_sites: Vec<&String> = self
            .epochs
            .first()
            .map(|e| e.ood_accuracy.keys().collect())
            .unwrap_or_default();
        ood_sites.sort();
        let mut body = String::from("epoch,train_loss,ce_loss,jsd_loss,lr_last,ind_accuracy");
        for s in &ood_sites {
            body.push_str(&format!(",ood_{s}_accuracy"));
        }
        body.push('\n');
        for e in &self.epochs {
            body.push_str(&format!(
                "{},{},{},{},{},{}",
                e.epoch, e.train_loss, e.ce_loss, e.jsd_loss, e.lr_last, e.ind_accuracy
            ));
            for s in &ood_sites {
                body.push_str(&format!(",{}", e.ood_accuracy[*s]));
            }
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Training inputs: one training split, the in-distribution validation
/// split, and the held-out sites.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: SplitData,
    pub ind_name: String,
    pub ind_val: SplitData,
    pub ood: BTreeMap<String, SplitData>,
    pub num_classes: usize,
}

/// Evaluation of one split: accuracy, plus AUC for binary tasks (score =
/// probability of class 1).
pub fn evaluate_split(
    model: &mut Model<f32>,
    split: &SplitData,
    batch_size: usize,
) -> Result<(f64, Option<f64>)> {
    let n = split.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty evaluation split".into()));
    }
    let mut preds = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let k = model.spec.num_classes;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = split.gather(&idx);
        let logits = model.infer(&batch.images)?;
        for row in 0..idx.len() {
            let vals: Vec<f32> = (0..k).map(|j| logits.at(row, j, 0, 0)).collect();
            let argmax = (0..k)
                .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
                .unwrap();
            preds.push(argmax);
            if k == 2 {
                // Stable two-class softmax probability of class 1.
                let d = (vals[1] - vals[0]) as f64;
                scores.push(1.0 / (1.0 + (-d).exp()));
            }
        }
        start = end;
    }
    let acc = metrics::accuracy(&preds, &split.labels)?;
    let auc = if k == 2 {
        let labels: Vec<bool> = split.labels.iter().map(|&l| l == 1).collect();
        // Single-class splits have no rank statistic.
        if labels.iter().any(|&b| b) && labels.iter().any(|&b| !b) {
            Some(metrics::auc(&scores, &labels)?)
        } else {
            None
        }
    } else {
        None
    };
    Ok((acc, auc))
}

fn numerical_abort(
    model: &Model<f32>,
    err: Error,
    epoch: usize,
    step: usize,
    lr: f64,
) -> Error {
    let layer_stats: Vec<serde_json::Value> = model
        .params
        .iter()
        .map(|p| {
            let max_abs = p.tensor.data().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
            let grad_max = p
                .tensor
                .grad
                .as_ref()
                .map(|g| g.iter().fold(0.0f32, |a, &v| a.max(v.abs())));
            serde_json::json!({
                "param": p.name,
                "max_abs": max_abs,
                "grad_max_abs": grad_max,
                "finite": p.tensor.all_finite(),
            })
        })
        .collect();
    Error::NumericalAbort {
        epoch,
        step,
        lr,
        detail: err.to_string(),
        diagnostics: serde_json::json!({
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "cause": err.to_string(),
            "layer_stats": layer_stats,
        }),
    }
}

struct StepLosses {
    total: f64,
    ce: f64,
    jsd: f64,
}

fn train_step(
    model: &mut Model<f32>,
    batch: &SplitData,
    cfg: &TrainConfig,
    rand: &mut dyn NormRandomness<f32>,
) -> Result<(StepLosses, BoundParams, Tape<f32>)> {
    let mut tape = Tape::new();
    let input = tape.constant(batch.images.clone());
    let bound = model.bind(&mut tape);
    match cfg.trainer {
        TrainerKind::SinglePass => {
            let logits = model.forward(&mut tape, input, Mode::Train, rand, &bound)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            tape.backward(loss)?;
            let total = tape.value(loss).item()?.to_f64();
            Ok((StepLosses { total, ce: total, jsd: 0.0 }, bound, tape))
        }
        TrainerKind::WinWin => {
            // Pass 1: perturbed statistics. Pass 2: the deployed
            // (global-statistics) path on the same batch.
            let y_hat = model.forward(&mut tape, input, Mode::Train, rand, &bound)?;
            let mut y_bar = model.forward(&mut tape, input, Mode::Eval, &mut NoDraws, &bound)?;
            if cfg.stop_grad_second_pass {
                let frozen = tape.value(y_bar).clone();
                y_bar = tape.constant(frozen);
            }
            let ce_hat = tape.cross_entropy(y_hat, &batch.labels)?;
            let ce_bar = tape.cross_entropy(y_bar, &batch.labels)?;
            let ce_sum = tape.add(ce_hat, ce_bar)?;
            let ce = tape.mul_scalar(ce_sum, 0.5)?;
            let jsd = losses::jsd_consistency(&mut tape, y_hat, y_bar)?;
            let weighted = tape.mul_scalar(jsd, cfg.delta as f32)?;
            let loss = tape.add(ce, weighted)?;
            tape.backward(loss)?;
            Ok((
                StepLosses {
                    total: tape.value(loss).item()?.to_f64(),
                    ce: tape.value(ce).item()?.to_f64(),
                    jsd: tape.value(jsd).item()?.to_f64(),
                },
                bound,
                tape,
            ))
        }
    }
}

/// Run one full training. Returns the per-epoch record; the model ends in
/// its final state.
pub fn train(model: &mut Model<f32>, data: &DataBundle, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.trainer == TrainerKind::WinWin {
        if let Some(stage) = model.spec.stages.iter().find(|s| s.norm.kind != NormKind::Win) {
            return Err(Error::InvalidConfig(format!(
                "the twice-forward trainer requires window normalization everywhere; \
                 found a {:?} layer (running-statistics semantics would be ambiguous \
                 across the two passes)",
                stage.norm.kind
            )));
        }
    }
    if data.train.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }

    let mut streams = RunStreams::new(cfg.seed);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut sgd = SgdState::new(&model.params);
    let mut record = RunRecord::default();
    let mut global_step = 0usize;

    // Window schedule for the offline mode.
    let (cache_layers, cache_parts) = model.window_schedule();
    let win_strategy = model
        .spec
        .stages
        .iter()
        .find(|s| s.norm.kind == NormKind::Win)
        .map(|s| s.norm.strategy);
    let win_tau = model
        .spec
        .stages
        .iter()
        .find(|s| s.norm.kind == NormKind::Win)
        .map(|s| s.norm.tau)
        .unwrap_or(0.7);

    for epoch in 0..cfg.epochs {
        // Deterministic shuffle from the data stream.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = streams.data.uniform_int(i + 1);
            order.swap(i, j);
        }

        let epoch_cache: Option<WindowCache> = if cfg.offline_windows && !cache_layers.is_empty() {
            let strategy = win_strategy.unwrap_or(Strategy::Window);
            Some(cache_epoch(
                &mut streams.window,
                steps_per_epoch,
                &cache_layers,
                win_tau,
                strategy,
                &cache_parts,
            )?)
        } else {
            None
        };

        let mut loss_acc = 0.0;
        let mut ce_acc = 0.0;
        let mut jsd_acc = 0.0;
        let mut lr_last = 0.0;
        for step in 0..steps_per_epoch {
            let lo = step * cfg.batch_size;
            let hi = ((step + 1) * cfg.batch_size).min(n);
            let mut batch = data.train.gather(&order[lo..hi]);
            if cfg.augment {
                augment_batch(&mut batch, &mut streams.data);
            }

            let lr = lr_at(cfg, global_step, steps_per_epoch);
            lr_last = lr;
            let step_result = match &epoch_cache {
                Some(cache) => {
                    let mut rand =
                        CachedRandomness { cache, step, lambda: &mut streams.lambda };
                    train_step(model, &batch, cfg, &mut rand)
                }
                None => {
                    let mut rand = OnlineRandomness {
                        window: &mut streams.window,
                        lambda: &mut streams.lambda,
                    };
                    train_step(model, &batch, cfg, &mut rand)
                }
            };
            let (losses, bound, tape) = match step_result {
                Ok(x) => x,
                Err(e) => return Err(numerical_abort(model, e, epoch, global_step, lr)),
            };
            if !losses.total.is_finite() {
                let e = Error::degenerate("train", format!("loss {}", losses.total));
                return Err(numerical_abort(model, e, epoch, global_step, lr));
            }
            model.collect_grads(&tape, &bound);
            drop(tape);
            sgd_step(&mut model.params, &mut sgd, lr, cfg.momentum, cfg.weight_decay)?;

            loss_acc += losses.total;
            ce_acc += losses.ce;
            jsd_acc += losses.jsd;
            global_step += 1;
        }

        let (ind_accuracy, ind_auc) = evaluate_split(model, &data.ind_val, 250)?;
        let mut ood_accuracy = BTreeMap::new();
        let mut ood_auc = BTreeMap::new();
        for (site, split) in &data.ood {
            let (acc, auc) = evaluate_split(model, split, 250)?;
            ood_accuracy.insert(site.clone(), acc);
            if let Some(a) = auc {
                ood_auc.insert(site.clone(), a);
            }
        }
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_acc / steps_per_epoch as f64,
            ce_loss: ce_acc / steps_per_epoch as f64,
            jsd_loss: jsd_acc / steps_per_epoch as f64,
            lr_last,
            ind_accuracy,
            ind_auc,
            ood_accuracy,
            ood_auc,
        });
    }
    Ok(record)
}

/// Convenience used by tests and the CLI: standard single-pass loop.
pub fn train_single_pass(
    model: &mut Model<f32>,
    data: &DataBundle,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    if cfg.trainer != TrainerKind::SinglePass {
        return Err(Error::InvalidConfig("config selects a different trainer".into()));
    }
    train(model, data, cfg)
}

/// Twice-forward consistency training.
pub fn train_win_win(
    model: &mut Model<f32>,
    data: &DataBundle,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    if cfg.trainer != TrainerKind::WinWin {
        return Err(Error::InvalidConfig("config selects a different trainer".into()));
    }
    train(model, data, cfg)
}

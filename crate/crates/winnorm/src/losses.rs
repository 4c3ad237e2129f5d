//! Classification losses: cross-entropy, the symmetric-KL consistency
//! term between two logit sets, and their weighted total.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor4};

/// Logits with their ground-truth labels.
#[derive(Clone, Debug)]
pub struct LogitsBatch<T: Real> {
    pub logits: Tensor4<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> LogitsBatch<T> {
    pub fn new(logits: Tensor4<T>, labels: Vec<usize>) -> Result<Self> {
        let (n, k, h, w) = logits.dims();
        if h != 1 || w != 1 || k < 2 {
            return Err(Error::shape("LogitsBatch", format!("want (N,K,1,1) with K >= 2, got {:?}", logits.dims())));
        }
        if labels.len() != n {
            return Err(Error::shape("LogitsBatch", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range 0..{k}")));
        }
        Ok(LogitsBatch { logits, labels })
    }
}

/// Batch-mean cross-entropy on the tape: -mean_n log softmax(logits)[y_n].
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: VarId, labels: &[usize]) -> Result<VarId> {
    tape.cross_entropy(logits, labels)
}

/// Symmetric KL consistency between two logit sets, batch-mean:
/// 0.5 * (KL(p || q) + KL(q || p)) with p = softmax(a), q = softmax(b).
pub fn jsd_consistency<T: Real>(tape: &mut Tape<T>, a: VarId, b: VarId) -> Result<VarId> {
    let ad = tape.value(a).dims();
    let bd = tape.value(b).dims();
    if ad != bd {
        return Err(Error::shape("jsd_consistency", format!("{ad:?} vs {bd:?}")));
    }
    let n = ad.0;
    let lp = tape.log_softmax(a)?;
    let lq = tape.log_softmax(b)?;
    let p = tape.exp(lp)?;
    let q = tape.exp(lq)?;
    let pq = tape.sub(lp, lq)?;
    let qp = tape.sub(lq, lp)?;
    let kl_pq = tape.mul(p, pq)?;
    let kl_qp = tape.mul(q, qp)?;
    let sum = tape.add(kl_pq, kl_qp)?;
    let total = tape.reduce_sum_all(sum)?;
    tape.mul_scalar(total, T::from_f64(0.5 / n as f64))
}

/// Total training objective: averaged two-pass cross-entropy plus the
/// weighted consistency term,
/// `0.5 * (CE(y_hat) + CE(y_bar)) + delta * JSD(y_hat, y_bar)`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    y_hat: VarId,
    y_bar: VarId,
    labels: &[usize],
    delta: f64,
) -> Result<VarId> {
    if delta < 0.0 {
        return Err(Error::InvalidConfig(format!("delta {delta} must be >= 0")));
    }
    let ce_hat = tape.cross_entropy(y_hat, labels)?;
    let ce_bar = tape.cross_entropy(y_bar, labels)?;
    let ce_sum = tape.add(ce_hat, ce_bar)?;
    let ce = tape.mul_scalar(ce_sum, T::from_f64(0.5))?;
    if delta == 0.0 {
        return Ok(ce);
    }
    let jsd = jsd_consistency(tape, y_hat, y_bar)?;
    let weighted = tape.mul_scalar(jsd, T::from_f64(delta))?;
    tape.add(ce, weighted)
}

/// Value-level cross-entropy for evaluation code paths.
pub fn cross_entropy_value<T: Real>(batch: &LogitsBatch<T>) -> Result<f64> {
    let mut tape = Tape::inference();
    let id = tape.constant(batch.logits.clone());
    let loss = tape.cross_entropy(id, &batch.labels)?;
    Ok(tape.value(loss).item()?.to_f64())
}

/// Value-level consistency loss.
pub fn jsd_value<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    let mut tape = Tape::inference();
    let ia = tape.constant(a.clone());
    let ib = tape.constant(b.clone());
    let loss = jsd_consistency(&mut tape, ia, ib)?;
    Ok(tape.value(loss).item()?.to_f64())
}

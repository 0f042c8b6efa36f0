//! Label-smoothed cross entropy and the two-stream training objective.

use crate::autograd::{Tape, Var};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::StreamLogits;
use crate::tensor::{Scalar, Tensor};

/// Batch-mean smoothed cross entropy on the tape; see [`smoothed_cross_entropy`].
pub fn cross_entropy_smoothed<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &[usize],
    eps: f64,
    tau: f64,
) -> Result<Var> {
    tape.cross_entropy_smoothed(logits, targets, S::from_f64(eps), S::from_f64(tau))
}

/// Sum of the two streams' losses; each stream trains its own classifier.
pub fn two_stream_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: StreamLogits,
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<Var> {
    let (eps, tau) = (cfg.label_smoothing, cfg.temperature);
    let lt = cross_entropy_smoothed(tape, logits.transformer, targets, eps, tau)?;
    let lc = cross_entropy_smoothed(tape, logits.cnn, targets, eps, tau)?;
    tape.add(lt, lc)
}

/// `−Σ_k q_k log p_k` for one row, with `p = softmax(z/τ)` and
/// `q = (1−ε)·onehot(target) + ε/K`. Evaluated in f64.
pub fn smoothed_cross_entropy(logits: &[f64], target: usize, eps: f64, tau: f64) -> Result<f64> {
    let k = logits.len();
    if k < 2 || target >= k {
        return Err(Error::invalid(format!("target {target} invalid for {k} classes")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(scaled
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let q = eps / k as f64 + if j == target { 1.0 - eps } else { 0.0 };
            -q * (s - lse)
        })
        .sum())
}

/// Mean of [`smoothed_cross_entropy`] over the rows of `(N, K)` logits.
pub fn mean_smoothed_cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize], eps: f64, tau: f64) -> Result<f64> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape(format!("logits must be (N, K), got {:?}", logits.shape())));
    };
    if targets.len() != n {
        return Err(Error::invalid(format!("{} targets for {n} rows", targets.len())));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        total += smoothed_cross_entropy(&row, t, eps, tau)?;
    }
    Ok(total / n as f64)
}

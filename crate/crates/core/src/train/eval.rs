//! Evaluation: per-stream scores, accuracy metrics and the fusion sweep.

use crate::autograd::Tape;
use crate::config::{FusionConfig, FusionSpace};
use crate::data::skeleton::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::{prepare_batch, ThctNet};
use crate::nn::Mode;
use crate::tensor::argmax;
use crate::train::fusion::{late_fuse, sweep_weights};
use crate::train::loss::smoothed_cross_entropy;

/// Per-sample logits of both streams, in split order.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamScores {
    pub transformer: Vec<Vec<f64>>,
    pub cnn: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl StreamScores {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn fused_predictions(&self, cfg: FusionConfig) -> Result<Vec<usize>> {
        self.transformer
            .iter()
            .zip(&self.cnn)
            .map(|(t, c)| late_fuse(t, c, cfg).map(|f| argmax(&f)))
            .collect()
    }

    pub fn transformer_predictions(&self) -> Vec<usize> {
        self.transformer.iter().map(|r| argmax(r)).collect()
    }

    pub fn cnn_predictions(&self) -> Vec<usize> {
        self.cnn.iter().map(|r| argmax(r)).collect()
    }

    /// Mean over samples of the summed per-stream smoothed cross entropy.
    pub fn loss(&self, eps: f64, tau: f64) -> Result<f64> {
        let mut total = 0.0;
        for ((t, c), &y) in self.transformer.iter().zip(&self.cnn).zip(&self.labels) {
            total += smoothed_cross_entropy(t, y, eps, tau)? + smoothed_cross_entropy(c, y, eps, tau)?;
        }
        Ok(total / self.len() as f64)
    }
}

/// Eval-mode logits of both streams, original entity order.
pub fn stream_scores(net: &mut ThctNet<f32>, split: &DatasetSplit, batch_size: usize) -> Result<StreamScores> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let m = net.config.entities;
    let identity: Vec<usize> = (0..m).collect();
    let mut scores = StreamScores {
        transformer: Vec::with_capacity(split.len()),
        cnn: Vec::with_capacity(split.len()),
        labels: Vec::with_capacity(split.len()),
    };
    for chunk in split.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let perms = vec![identity.clone(); chunk.len()];
        let batch = prepare_batch::<f32>(&refs, &perms, &net.config)?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &batch, Mode::Eval)?;
        for (dst, var) in [(&mut scores.transformer, out.transformer), (&mut scores.cnn, out.cnn)] {
            let v = tape.value(var);
            v.check_finite("evaluation logits")?;
            let k = v.shape()[1];
            dst.extend(v.data().chunks(k).map(|r| r.iter().map(|&x| x as f64).collect::<Vec<_>>()));
        }
        scores.labels.extend_from_slice(&batch.labels);
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() || labels.is_empty() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= num_classes || y >= num_classes {
                return Err(Error::invalid(format!("class index out of range: {p} / {y}")));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            top1: correct as f64 / labels.len() as f64,
            per_class,
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fused: Metrics,
    pub transformer: Metrics,
    pub cnn: Metrics,
    pub loss: f64,
    pub scores: StreamScores,
}

pub fn evaluate(net: &mut ThctNet<f32>, split: &DatasetSplit) -> Result<EvalReport> {
    let cfg = net.config.clone();
    if split.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "split has {} classes, model has {}",
            split.num_classes(),
            cfg.num_classes
        )));
    }
    let scores = stream_scores(net, split, cfg.train.batch_size)?;
    report_from_scores(scores, cfg.fusion, cfg.num_classes, cfg.train.label_smoothing, cfg.train.temperature)
}

pub fn report_from_scores(
    scores: StreamScores,
    fusion: FusionConfig,
    num_classes: usize,
    eps: f64,
    tau: f64,
) -> Result<EvalReport> {
    let k = num_classes;
    Ok(EvalReport {
        fused: Metrics::from_predictions(&scores.fused_predictions(fusion)?, &scores.labels, k)?,
        transformer: Metrics::from_predictions(&scores.transformer_predictions(), &scores.labels, k)?,
        cnn: Metrics::from_predictions(&scores.cnn_predictions(), &scores.labels, k)?,
        loss: scores.loss(eps, tau)?,
        scores,
    })
}

/// Fused top-1 accuracy for each weight in `0.0, 0.1, …, 1.0`.
pub fn fusion_sweep(scores: &StreamScores, space: FusionSpace, num_classes: usize) -> Result<Vec<(f64, f64)>> {
    sweep_weights()
        .into_iter()
        .map(|w| {
            let preds = scores.fused_predictions(FusionConfig::new(w, space)?)?;
            Ok((w, Metrics::from_predictions(&preds, &scores.labels, num_classes)?.top1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_metrics() {
        let labels = [0, 1, 1, 2, 2, 2];
        let m = Metrics::from_predictions(&[2; 6], &labels, 3).unwrap();
        assert!((m.top1 - 0.5).abs() < 1e-15);
        for (c, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
            assert_eq!(row[0] + row[1], 0);
        }
        assert_eq!(m.per_class, vec![Some(0.0), Some(0.0), Some(1.0)]);
    }

    #[test]
    fn accuracy_is_confusion_trace() {
        let labels = [0, 1, 2, 0, 1, 2, 3];
        let preds = [0, 2, 2, 1, 1, 0, 3];
        let m = Metrics::from_predictions(&preds, &labels, 5).unwrap();
        let trace: usize = (0..5).map(|c| m.confusion[c][c]).sum();
        assert_eq!(m.top1, trace as f64 / 7.0);
        assert_eq!(m.per_class[4], None);
    }

    #[test]
    fn sweep_endpoints_equal_single_streams() {
        let scores = StreamScores {
            transformer: vec![vec![1.0, 0.0], vec![0.2, 0.1], vec![-1.0, 3.0]],
            cnn: vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![2.0, 0.5]],
            labels: vec![0, 1, 1],
        };
        let sweep = fusion_sweep(&scores, FusionSpace::Logit, 2).unwrap();
        let t = Metrics::from_predictions(&scores.transformer_predictions(), &scores.labels, 2).unwrap();
        let c = Metrics::from_predictions(&scores.cnn_predictions(), &scores.labels, 2).unwrap();
        assert_eq!(sweep[0], (0.0, c.top1));
        assert_eq!(sweep[10], (1.0, t.top1));
    }
}

//! Epoch loop, metrics log and checkpointing.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autograd::Tape;
use crate::config::{ModelConfig, PermutationMode};
use crate::data::skeleton::{sample_entity_permutation, DatasetSplit, SampleContext};
use crate::error::{Error, Result};
use crate::model::{prepare_batch, ThctNet};
use crate::nn::Mode;
use crate::tensor::argmax;
use crate::train::checkpoint::Checkpoint;
use crate::train::eval::evaluate;
use crate::train::fusion::late_fuse;
use crate::train::loss::two_stream_loss;
use crate::train::optim::{lr_at_epoch, SgdNesterov};
use crate::Rng;

pub const METRICS_HEADER: &str = "epoch,split,loss,top1";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const INITIAL_CHECKPOINT: &str = "initial.ckpt";

/// Stream of the training generator, kept apart from parameter initialization.
const TRAIN_STREAM: u64 = 1;

/// Splits `order` into batches of `size`; a trailing single sample joins the
/// previous batch so batch normalization always sees at least two.
pub fn batch_ranges(len: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(1);
    let mut out: Vec<_> = (0..len).step_by(size).map(|s| s..(s + size).min(len)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn csv_rows(&self) -> String {
        format!(
            "{e},train,{:.9},{:.6}\n{e},val,{:.9},{:.6}\n",
            self.train_loss,
            self.train_top1,
            self.val_loss,
            self.val_top1,
            e = self.epoch
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: ThctNet<f32>,
    pub optimizer: SgdNesterov<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub best_top1: f64,
}

impl TrainState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let seed = config.train.seed;
        let momentum = config.train.momentum;
        let net = ThctNet::new(config, seed)?;
        let optimizer = SgdNesterov::new(&net.store, momentum);
        let mut rng = Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            net,
            optimizer,
            epoch: 0,
            rng,
            best_top1: f64::NEG_INFINITY,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (net, optimizer) = ckpt.restore()?;
        Ok(Self {
            net,
            optimizer,
            epoch: ckpt.epoch as usize,
            rng: ckpt.rng.restore(),
            best_top1: ckpt.best_top1,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net, &self.optimizer, self.epoch as u64, self.best_top1, &self.rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// One pass over `train`; returns the sample-weighted mean loss and the
    /// fused accuracy of the training-mode predictions.
    pub fn run_epoch(&mut self, train: &DatasetSplit) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let cfg = self.net.config.clone();
        let lr = lr_at_epoch(&cfg.train, self.epoch);
        let m = cfg.entities;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let shared = (cfg.train.permutation == PermutationMode::PerEpoch)
            .then(|| sample_entity_permutation(m, &mut self.rng, SampleContext::Train));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, range) in batch_ranges(order.len(), cfg.train.batch_size).into_iter().enumerate() {
            let idx = &order[range];
            let samples: Vec<_> = idx.iter().map(|&i| &train.samples[i]).collect();
            let perms: Vec<_> = idx
                .iter()
                .map(|_| match &shared {
                    Some(p) => p.clone(),
                    None => sample_entity_permutation(m, &mut self.rng, SampleContext::Train),
                })
                .collect();
            let batch = prepare_batch::<f32>(&samples, &perms, &cfg)?;
            let mut tape = Tape::new();
            let logits = self.net.forward(&mut tape, &batch, Mode::Train)?;
            let loss = two_stream_loss(&mut tape, logits, &batch.labels, &cfg.train)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {} batch {b} (lr {lr})",
                    self.epoch + 1
                )));
            }
            let (t, c) = (tape.value(logits.transformer), tape.value(logits.cnn));
            let k = t.shape()[1];
            for ((rt, rc), &y) in t.data().chunks(k).zip(c.data().chunks(k)).zip(&batch.labels) {
                let rt: Vec<f64> = rt.iter().map(|&v| v as f64).collect();
                let rc: Vec<f64> = rc.iter().map(|&v| v as f64).collect();
                correct += usize::from(argmax(&late_fuse(&rt, &rc, cfg.fusion)?) == y);
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;
            let grads = tape.param_grads();
            if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at epoch {} batch {b}",
                    self.net.store.name(*id),
                    self.epoch + 1
                )));
            }
            self.optimizer.step(&mut self.net.store, &grads, lr)?;
        }
        self.epoch += 1;
        Ok((loss_sum / train.len() as f64, correct as f64 / train.len() as f64))
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Stop once this many epochs are complete (defaults to the configured count).
    pub stop_at: Option<usize>,
}

fn append_metrics(dir: &Path, fresh: bool, rows: &str) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let mut file = if fresh || !path.exists() {
        let mut f = std::fs::File::create(&path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    } else {
        OpenOptions::new().append(true).open(&path)?
    };
    file.write_all(rows.as_bytes())?;
    Ok(())
}

/// Trains from `state.epoch` up to the configured epoch count, evaluating on
/// `val` after every epoch. With an output directory, writes the metrics CSV,
/// `initial.ckpt` (fresh runs only), `last.ckpt` every epoch and `best.ckpt`
/// whenever validation accuracy improves.
pub fn train(
    state: &mut TrainState,
    train: &DatasetSplit,
    val: &DatasetSplit,
    output: &TrainOutput,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let cfg = state.config().clone();
    for split in [train, val] {
        if split.is_empty() {
            return Err(Error::invalid(format!("{} split is empty", split.role.as_str())));
        }
        if split.num_classes() != cfg.num_classes {
            return Err(Error::Config(format!(
                "{} split has {} classes, model has {}",
                split.role.as_str(),
                split.num_classes(),
                cfg.num_classes
            )));
        }
    }
    let fresh = state.epoch == 0;
    if let Some(dir) = &output.dir {
        std::fs::create_dir_all(dir)?;
        if fresh {
            state.checkpoint().save(&dir.join(INITIAL_CHECKPOINT))?;
            append_metrics(dir, true, "")?;
        }
    }
    let stop = output.stop_at.unwrap_or(cfg.train.epochs).min(cfg.train.epochs);
    let mut logs = Vec::new();
    while state.epoch < stop {
        let lr = lr_at_epoch(&cfg.train, state.epoch);
        let (train_loss, train_top1) = state.run_epoch(train)?;
        let report = evaluate(&mut state.net, val)?;
        let log = EpochLog {
            epoch: state.epoch,
            train_loss,
            train_top1,
            val_loss: report.loss,
            val_top1: report.fused.top1,
            lr,
        };
        let improved = log.val_top1 > state.best_top1;
        if improved {
            state.best_top1 = log.val_top1;
        }
        if let Some(dir) = &output.dir {
            append_metrics(dir, false, &log.csv_rows())?;
            let ckpt = state.checkpoint();
            ckpt.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

//! The two-stream network and its input pipeline.

pub mod cnn;
pub mod transformer;

use rand::SeedableRng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::data::skeleton::{
    center_sequence, motion_difference, pad_entities, permute_entity_axis, resample_frames, SkeletonSequence,
};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

pub use cnn::{fuse_branches, stack_entities, CnnBranch, CnnStream, ResidualBlock};
pub use transformer::{positional_encoding, tokenize, tokens_to_batch, AttentionBlock, Tokens, TransformerStream};

/// Network inputs for a batch of sequences.
#[derive(Clone, Debug)]
pub struct Batch<S: Scalar = f32> {
    /// `(N, 3·T_w·V_w·M_w, T', V', M')`.
    pub tokens: Tensor<S>,
    /// `(N, 3, T, V·M)`.
    pub raw: Tensor<S>,
    /// Motion counterpart of `raw`.
    pub motion: Tensor<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Brings a sequence to the configured `(3, T, V, M)`: frames resampled,
/// missing entities zero-padded.
pub fn conform(seq: &SkeletonSequence, cfg: &ModelConfig) -> Result<SkeletonSequence> {
    if seq.joints() != cfg.joints {
        return Err(Error::shape(format!(
            "sequence has {} joints, model expects {}",
            seq.joints(),
            cfg.joints
        )));
    }
    let seq = resample_frames(seq, cfg.frames)?;
    pad_entities(&seq, cfg.entities)
}

/// Builds the batch for `samples`, applying `perms[i]` to sample `i`'s entity axis.
pub fn prepare_batch<S: Scalar>(
    samples: &[&SkeletonSequence],
    perms: &[Vec<usize>],
    cfg: &ModelConfig,
) -> Result<Batch<S>> {
    if samples.is_empty() || samples.len() != perms.len() {
        return Err(Error::invalid(format!(
            "{} samples with {} permutations",
            samples.len(),
            perms.len()
        )));
    }
    let mut tokens = Vec::with_capacity(samples.len());
    let mut raw = Vec::with_capacity(samples.len());
    let mut motion = Vec::with_capacity(samples.len());
    for (seq, perm) in samples.iter().zip(perms) {
        let seq = conform(seq, cfg)?;
        let mut coords = permute_entity_axis(seq.coords(), perm)?;
        if cfg.normalize {
            coords = center_sequence(&coords);
        }
        let moved = motion_difference(&coords)?;
        tokens.push(tokenize(&coords.cast::<S>(), cfg.window)?);
        for (src, dst) in [(&coords, &mut raw), (&moved, &mut motion)] {
            let s = stack_entities(&src.cast::<S>())?;
            let mut shape = vec![1];
            shape.extend_from_slice(s.shape());
            dst.push(s.reshape(shape)?);
        }
    }
    let cat = |parts: &[Tensor<S>]| Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0);
    Ok(Batch {
        tokens: tokens_to_batch(&tokens)?,
        raw: cat(&raw)?,
        motion: cat(&motion)?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

/// Per-stream logits `(N, K)`.
#[derive(Clone, Copy, Debug)]
pub struct StreamLogits {
    pub transformer: Var,
    pub cnn: Var,
}

/// Both streams plus the parameter store they share.
#[derive(Clone, Debug)]
pub struct ThctNet<S: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub transformer: TransformerStream,
    pub cnn: CnnStream,
}

impl<S: Scalar> ThctNet<S> {
    /// Validates `config` and initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let transformer = TransformerStream::new(&mut store, &config, &mut rng)?;
        let cnn = CnnStream::new(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            transformer,
            cnn,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<S>, batch: &Batch<S>, mode: Mode) -> Result<StreamLogits> {
        let mut store = std::mem::take(&mut self.store);
        let out = self.forward_with(&mut store, tape, batch, mode);
        self.store = store;
        out
    }

    /// Forward pass reading parameters from `store` instead of `self.store`.
    pub fn forward_with(
        &self,
        store: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        batch: &Batch<S>,
        mode: Mode,
    ) -> Result<StreamLogits> {
        let tokens = tape.constant(batch.tokens.clone());
        let raw = tape.constant(batch.raw.clone());
        let motion = tape.constant(batch.motion.clone());
        let transformer = self.transformer.forward(tape, store, tokens, mode)?;
        let cnn = self.cnn.forward(tape, store, raw, motion)?;
        Ok(StreamLogits { transformer, cnn })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<T: Scalar>(&self) -> ThctNet<T> {
        ThctNet {
            config: self.config.clone(),
            store: self.store.cast(),
            transformer: self.transformer.clone(),
            cnn: self.cnn.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable_values()
    }
}

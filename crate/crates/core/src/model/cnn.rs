//! CNN stream: twin raw/motion branches, channel fusion, a factorized
//! residual block and a two-layer classifier.

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

/// `(C, T, V, M) -> (C, T, V·M)` with entity-major columns: column
/// `e·V + v` holds joint `v` of entity `e`.
pub fn stack_entities<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [c, t, v, m] = *x.shape() else {
        return Err(Error::shape(format!("stack_entities needs (C, T, V, M), got {:?}", x.shape())));
    };
    x.permute(&[0, 1, 3, 2])?.reshape([c, t, m * v])
}

/// One branch: point and temporal encoders over `(N, 3, T, VM)`, a transpose
/// that moves joints into channels, then 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub point: Conv2d,
    pub temporal: Conv2d,
    pub joint: Vec<Conv2d>,
}

impl CnnBranch {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let cc = &cfg.cnn;
        let point = Conv2d::same(store, &format!("{name}.point"), 3, cc.point_channels, [1, 1], rng)?;
        let temporal = Conv2d::same(
            store,
            &format!("{name}.temporal"),
            cc.point_channels,
            cc.temporal_channels,
            [3, 1],
            rng,
        )?;
        let mut joint = Vec::new();
        let mut c_in = cfg.joints * cfg.entities;
        for (i, &w) in cc.joint_channels.iter().chain(std::iter::once(&cc.fusion_channels)).enumerate() {
            joint.push(Conv2d::same(store, &format!("{name}.joint{i}"), c_in, w, [3, 3], rng)?);
            c_in = w;
        }
        Ok(Self { point, temporal, joint })
    }

    /// Point and temporal encoders: `(N, 3, T, VM) -> (N, C_temporal, T, VM)`.
    /// Both kernels have extent 1 on the joint axis.
    pub fn encode_points<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let x = self.point.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.temporal.forward(tape, store, x)?;
        Ok(tape.relu(x))
    }

    /// `(N, 3, T, VM) -> (N, C_fuse, T, C_temporal)`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let x = self.encode_points(tape, store, x)?;
        let mut x = tape.permute(x, &[0, 3, 2, 1])?;
        for conv in &self.joint {
            x = conv.forward(tape, store, x)?;
            x = tape.relu(x);
        }
        Ok(x)
    }
}

/// Channel concatenation, raw features first.
pub fn fuse_branches<S: Scalar>(tape: &mut Tape<S>, raw: Var, motion: Var) -> Result<Var> {
    tape.concat(&[raw, motion], 1)
}

/// `relu(x + W_{7×1} * relu(W_{1×7} * x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub row: Conv2d,
    pub col: Conv2d,
}

impl ResidualBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            row: Conv2d::same(store, &format!("{name}.conv1x7"), channels, channels, [1, 7], rng)?,
            col: Conv2d::same(store, &format!("{name}.conv7x1"), channels, channels, [7, 1], rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = self.row.forward(tape, store, x)?;
        let y = tape.relu(y);
        let y = self.col.forward(tape, store, y)?;
        let y = tape.add(x, y)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct CnnStream {
    pub raw: CnnBranch,
    pub motion: CnnBranch,
    pub residual: ResidualBlock,
    pub fc1: Linear,
    pub fc2: Linear,
    pub pool: usize,
}

impl CnnStream {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let cc = &cfg.cnn;
        let raw = CnnBranch::new(store, "cnn.raw", cfg, rng)?;
        let motion = CnnBranch::new(store, "cnn.motion", cfg, rng)?;
        let fused = 2 * cc.fusion_channels;
        let residual = ResidualBlock::new(store, "cnn.residual", fused, rng)?;
        let flat = fused * (cfg.frames / cc.pool) * (cc.temporal_channels / cc.pool);
        let fc1 = Linear::new(store, "cnn.fc1", flat, cc.hidden, rng)?;
        let fc2 = Linear::new(store, "cnn.fc2", cc.hidden, cfg.num_classes, rng)?;
        Ok(Self {
            raw,
            motion,
            residual,
            fc1,
            fc2,
            pool: cc.pool,
        })
    }

    /// Fused feature map `(N, 2·C_fuse, T, C_temporal)` after the residual block.
    pub fn features<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, raw: Var, motion: Var) -> Result<Var> {
        let r = self.raw.forward(tape, store, raw)?;
        let m = self.motion.forward(tape, store, motion)?;
        let x = fuse_branches(tape, r, m)?;
        self.residual.forward(tape, store, x)
    }

    /// Stacked raw and motion inputs `(N, 3, T, VM)` to logits `(N, K)`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, raw: Var, motion: Var) -> Result<Var> {
        let x = self.features(tape, store, raw, motion)?;
        let x = tape.avg_pool2d(x, self.pool)?;
        let n = tape.shape(x)[0];
        let flat = tape.value(x).numel() / n;
        let x = tape.reshape(x, &[n, flat])?;
        let x = self.fc1.forward(tape, store, x)?;
        let x = tape.relu(x);
        self.fc2.forward(tape, store, x)
    }
}

//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic     "THCT1"
//! version   u32
//! config    u32 length + UTF-8 `key = value` text
//! names     u32 count, then count × (u32 length + UTF-8)
//! records   count × (name, rank u32, rank × u32 dims, f32 payload), in name-table order
//! epoch     u64   completed epochs
//! best      f64   best validation accuracy so far
//! rng       32-byte seed, u64 stream, u128 word position
//! ```
//!
//! Optimizer velocities are stored as records named `velocity/<param>`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::model::ThctNet;
use crate::params::ParamKind;
use crate::tensor::Tensor;
use crate::train::optim::SgdNesterov;
use crate::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"THCT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity/";

/// Exact position of a [`Rng`] stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Config text exactly as stored, so reloading re-saves identical bytes.
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub epoch: u64,
    pub best_top1: f64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(net: &ThctNet<f32>, optimizer: &SgdNesterov<f32>, epoch: u64, best_top1: f64, rng: &Rng) -> Self {
        let store = &net.store;
        let mut tensors: Vec<(String, Tensor<f32>)> = store
            .ids()
            .map(|id| {
                let mut t = store.get(id).clone();
                t.zero_grad();
                t.set_requires_grad(false);
                (store.name(id).to_string(), t)
            })
            .collect();
        for id in store.trainable_ids() {
            let shape = store.get(id).shape().to_vec();
            let v = Tensor::new(shape, optimizer.velocity(id).to_vec()).expect("velocity matches parameter");
            tensors.push((format!("{VELOCITY_PREFIX}{}", store.name(id)), v));
        }
        Self {
            config_text: net.config.to_text(),
            tensors,
            epoch,
            best_top1,
            rng: RngState::capture(rng),
        }
    }

    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::from_text(&self.config_text)
    }

    /// Rebuilds the network and optimizer; every parameter and velocity must be present with a matching shape.
    pub fn restore(&self) -> Result<(ThctNet<f32>, SgdNesterov<f32>)> {
        let config = self.config()?;
        let momentum = config.train.momentum;
        let mut net = ThctNet::<f32>::new(config, 0)?;
        self.load_into(&mut net)?;
        let mut optimizer = SgdNesterov::new(&net.store, momentum);
        for id in net.store.trainable_ids().collect::<Vec<_>>() {
            let name = format!("{VELOCITY_PREFIX}{}", net.store.name(id));
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {name}")))?;
            optimizer.set_velocity(id, t.data().to_vec())?;
        }
        Ok((net, optimizer))
    }

    /// Copies stored parameters into `net`, checking names and shapes.
    pub fn load_into(&self, net: &mut ThctNet<f32>) -> Result<()> {
        let params = self.tensors.iter().filter(|(n, _)| !n.starts_with(VELOCITY_PREFIX));
        let mut seen = 0;
        for (name, t) in params {
            net.store.assign(name, t.clone())?;
            seen += 1;
        }
        if seen != net.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {seen} parameter tensors, model has {}",
                net.store.len()
            )));
        }
        for id in net.store.ids().collect::<Vec<_>>() {
            let on = net.store.kind(id) == ParamKind::Trainable;
            net.store.get_mut(id).set_requires_grad(on);
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.string(&self.config_text)?;
        w.u32(self.tensors.len() as u32)?;
        for (name, _) in &self.tensors {
            w.string(name)?;
        }
        for (name, t) in &self.tensors {
            w.string(name)?;
            w.u32(t.rank() as u32)?;
            for &d in t.shape() {
                w.u32(d as u32)?;
            }
            w.f32s(t.data())?;
        }
        w.u64(self.epoch)?;
        w.f64(self.best_top1)?;
        w.bytes(&self.rng.seed)?;
        w.u64(self.rng.stream)?;
        w.u128(self.rng.word_pos)?;
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let names = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != names.len() {
            return Err(Error::CheckpointMismatch("duplicate tensor names".into()));
        }
        let mut tensors = Vec::with_capacity(count);
        for expected in names {
            let name = r.string()?;
            if name != expected {
                return Err(Error::CheckpointMismatch(format!(
                    "record {name:?} out of order, expected {expected:?}"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let epoch = r.u64()?;
        let best_top1 = r.f64()?;
        let mut seed = [0u8; 32];
        r.fill(&mut seed)?;
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        r.expect_end()?;
        Ok(Self {
            config_text,
            tensors,
            epoch,
            best_top1,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

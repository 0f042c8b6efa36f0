//! Model and training configuration with a flat `key = value` file format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Non-overlapping tokenization window over (time, joint, entity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub t: usize,
    pub v: usize,
    pub m: usize,
}

impl WindowSpec {
    pub fn new(t: usize, v: usize, m: usize) -> Self {
        Self { t, v, m }
    }

    pub fn volume(&self) -> usize {
        self.t * self.v * self.m
    }

    /// Window grid `(T/T_w, V/V_w, M/M_w)`, remainders dropped.
    pub fn grid(&self, frames: usize, joints: usize, entities: usize) -> Result<[usize; 3]> {
        if self.t == 0 || self.v == 0 || self.m == 0 {
            return Err(Error::invalid(format!("window {self} has a zero extent")));
        }
        if self.t > frames || self.v > joints || self.m > entities {
            return Err(Error::invalid(format!(
                "window {self} exceeds input ({frames}, {joints}, {entities})"
            )));
        }
        Ok([frames / self.t, joints / self.v, entities / self.m])
    }

    /// Token count `U = ⌊T/T_w⌋·⌊V/V_w⌋·⌊M/M_w⌋`.
    pub fn tokens(&self, frames: usize, joints: usize, entities: usize) -> Result<usize> {
        Ok(self.grid(frames, joints, entities)?.iter().product())
    }
}

impl std::fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.t, self.v, self.m)
    }
}

impl FromStr for WindowSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match parse_list::<usize>(s)?.as_slice() {
            &[t, v, m] => Ok(Self { t, v, m }),
            _ => Err(Error::Config(format!("window must be T,V,M, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Query/key channels per head.
    pub c_qkv: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    /// Output channels of the 1×1 point encoder.
    pub point_channels: usize,
    /// Output channels of the 3×1 temporal encoder; becomes the last spatial
    /// axis after the joint-to-channel transpose.
    pub temporal_channels: usize,
    /// Widths of the convolutions between the transpose and the fusion layer.
    pub joint_channels: Vec<usize>,
    /// Output channels of the 3×3 layer that feeds branch fusion.
    pub fusion_channels: usize,
    pub hidden: usize,
    /// Average-pooling window after the residual block.
    pub pool: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionSpace {
    Logit,
    Probability,
}

impl FromStr for FusionSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(FusionSpace::Logit),
            "probability" => Ok(FusionSpace::Probability),
            _ => Err(Error::Config(format!("fusion space must be logit or probability, got {s:?}"))),
        }
    }
}

impl FusionSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionSpace::Logit => "logit",
            FusionSpace::Probability => "probability",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    /// Weight of the transformer stream; the CNN stream gets `1 - weight`.
    pub weight: f64,
    pub space: FusionSpace,
}

impl FusionConfig {
    pub fn new(weight: f64, space: FusionSpace) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Config(format!("fusion weight must lie in [0, 1], got {weight}")));
        }
        Ok(Self { weight, space })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PermutationMode {
    /// A fresh entity order for every sample every epoch.
    PerSample,
    /// One entity order shared by all samples of an epoch.
    PerEpoch,
}

impl FromStr for PermutationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-sample" => Ok(PermutationMode::PerSample),
            "per-epoch" => Ok(PermutationMode::PerEpoch),
            _ => Err(Error::Config(format!("permutation must be per-sample or per-epoch, got {s:?}"))),
        }
    }
}

impl PermutationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PermutationMode::PerSample => "per-sample",
            PermutationMode::PerEpoch => "per-epoch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub seed: u64,
    pub permutation: PermutationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_decay: 0.1,
            milestones: vec![60, 90],
            momentum: 0.9,
            batch_size: 32,
            epochs: 110,
            label_smoothing: 0.1,
            temperature: 1.0,
            seed: 0,
            permutation: PermutationMode::PerSample,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 (batch normalization)".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) || self.milestones.contains(&0) {
            return bad(format!(
                "milestones {:?} must be strictly increasing and positive",
                self.milestones
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub frames: usize,
    pub joints: usize,
    pub entities: usize,
    pub window: WindowSpec,
    pub normalize: bool,
    pub transformer: TransformerConfig,
    pub cnn: CnnConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            frames: 60,
            joints: 25,
            entities: 2,
            window: WindowSpec::new(20, 1, 2),
            normalize: true,
            transformer: TransformerConfig {
                layers: 3,
                heads: 8,
                d_model: 64,
                c_qkv: 8,
            },
            cnn: CnnConfig {
                point_channels: 64,
                temporal_channels: 8,
                joint_channels: vec![96, 64],
                fusion_channels: 64,
                hidden: 256,
                pool: 4,
            },
            fusion: FusionConfig {
                weight: 0.5,
                space: FusionSpace::Logit,
            },
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small model for the synthetic end-to-end task: `T=20` with a
    /// `(5, 25, 2)` window gives four tokens.
    pub fn micro(num_classes: usize) -> Self {
        Self {
            num_classes,
            frames: 20,
            joints: 25,
            entities: 2,
            window: WindowSpec::new(5, 25, 2),
            normalize: true,
            transformer: TransformerConfig {
                layers: 1,
                heads: 2,
                d_model: 8,
                c_qkv: 4,
            },
            cnn: CnnConfig {
                point_channels: 8,
                temporal_channels: 4,
                joint_channels: vec![12, 8],
                fusion_channels: 8,
                hidden: 32,
                pool: 2,
            },
            fusion: FusionConfig {
                weight: 0.5,
                space: FusionSpace::Logit,
            },
            train: TrainConfig {
                lr: 0.01,
                epochs: 30,
                milestones: vec![20],
                ..TrainConfig::default()
            },
        }
    }

    /// Micro architecture on a reduced skeleton (`T=8, V=5`) so that
    /// finite-difference checks over every parameter stay fast.
    pub fn gradcheck(num_classes: usize) -> Self {
        Self {
            frames: 8,
            joints: 5,
            window: WindowSpec::new(2, 5, 2),
            ..Self::micro(num_classes)
        }
    }

    pub fn tokens(&self) -> Result<usize> {
        self.window.tokens(self.frames, self.joints, self.entities)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("at least 2 classes are required".into());
        }
        if self.frames < 2 || self.joints == 0 || self.entities == 0 {
            return bad(format!(
                "invalid input extents T={}, V={}, M={}",
                self.frames, self.joints, self.entities
            ));
        }
        self.tokens().map_err(|e| Error::Config(e.to_string()))?;
        let tc = &self.transformer;
        if tc.layers == 0 || tc.heads == 0 || tc.d_model == 0 || tc.c_qkv == 0 {
            return bad("transformer sizes must be positive".into());
        }
        if tc.d_model % 2 != 0 {
            return bad(format!("d_model must be even for positional encoding, got {}", tc.d_model));
        }
        if tc.d_model % tc.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", tc.d_model, tc.heads));
        }
        let cc = &self.cnn;
        if cc.point_channels == 0
            || cc.temporal_channels == 0
            || cc.fusion_channels == 0
            || cc.hidden == 0
            || cc.joint_channels.contains(&0)
        {
            return bad("CNN widths must be positive".into());
        }
        if cc.pool == 0 || cc.pool > self.frames || cc.pool > cc.temporal_channels {
            return bad(format!(
                "pool {} must fit the ({}, {}) residual feature map",
                cc.pool, self.frames, cc.temporal_channels
            ));
        }
        FusionConfig::new(self.fusion.weight, self.fusion.space)?;
        self.train.validate()
    }

    /// One `key = value` line per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, value) in self.pairs() {
            writeln!(s, "{key} = {value}").unwrap();
        }
        s
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("frames", self.frames.to_string()),
            ("joints", self.joints.to_string()),
            ("entities", self.entities.to_string()),
            ("window", self.window.to_string()),
            ("normalize", self.normalize.to_string()),
            ("transformer.layers", self.transformer.layers.to_string()),
            ("transformer.heads", self.transformer.heads.to_string()),
            ("transformer.d_model", self.transformer.d_model.to_string()),
            ("transformer.c_qkv", self.transformer.c_qkv.to_string()),
            ("cnn.point_channels", self.cnn.point_channels.to_string()),
            ("cnn.temporal_channels", self.cnn.temporal_channels.to_string()),
            ("cnn.joint_channels", join(&self.cnn.joint_channels)),
            ("cnn.fusion_channels", self.cnn.fusion_channels.to_string()),
            ("cnn.hidden", self.cnn.hidden.to_string()),
            ("cnn.pool", self.cnn.pool.to_string()),
            ("fusion.weight", self.fusion.weight.to_string()),
            ("fusion.space", self.fusion.space.as_str().to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.lr_decay", self.train.lr_decay.to_string()),
            ("train.milestones", join(&self.train.milestones)),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.label_smoothing", self.train.label_smoothing.to_string()),
            ("train.temperature", self.train.temperature.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.permutation", self.train.permutation.as_str().to_string()),
        ]
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "num_classes" => self.num_classes = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "joints" => self.joints = parse(key, value)?,
            "entities" => self.entities = parse(key, value)?,
            "window" => self.window = value.parse()?,
            "normalize" => self.normalize = parse(key, value)?,
            "transformer.layers" => self.transformer.layers = parse(key, value)?,
            "transformer.heads" => self.transformer.heads = parse(key, value)?,
            "transformer.d_model" => self.transformer.d_model = parse(key, value)?,
            "transformer.c_qkv" => self.transformer.c_qkv = parse(key, value)?,
            "cnn.point_channels" => self.cnn.point_channels = parse(key, value)?,
            "cnn.temporal_channels" => self.cnn.temporal_channels = parse(key, value)?,
            "cnn.joint_channels" => self.cnn.joint_channels = parse_list(value)?,
            "cnn.fusion_channels" => self.cnn.fusion_channels = parse(key, value)?,
            "cnn.hidden" => self.cnn.hidden = parse(key, value)?,
            "cnn.pool" => self.cnn.pool = parse(key, value)?,
            "fusion.weight" => self.fusion.weight = parse(key, value)?,
            "fusion.space" => self.fusion.space = value.parse()?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, value)?,
            "train.milestones" => self.train.milestones = parse_list(value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.label_smoothing" => self.train.label_smoothing = parse(key, value)?,
            "train.temperature" => self.train.temperature = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.permutation" => self.train.permutation = value.parse()?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every setting of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid list entry {p:?} in {value:?}")))
        })
        .collect()
}

//! Procedural two-person interaction sequences on the 25-joint NTU skeleton.
//!
//! Each class is a motion archetype. Per-sample randomness covers start
//! distance, speed, body scale, heading and phase, and Gaussian noise is added
//! to every coordinate.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::data::skeleton::{DatasetSplit, SequenceMeta, SkeletonSequence, SplitRole, COORDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const JOINTS: usize = 25;
pub const ENTITIES: usize = 2;

/// Rest pose, spine base at the origin, facing +z, meters.
const REST_POSE: [[f64; 3]; JOINTS] = [
    [0.0, 0.0, 0.0],      // 0 spine base
    [0.0, 0.25, 0.0],     // 1 spine mid
    [0.0, 0.55, 0.0],     // 2 neck
    [0.0, 0.70, 0.0],     // 3 head
    [-0.18, 0.45, 0.0],   // 4 left shoulder
    [-0.20, 0.20, 0.0],   // 5 left elbow
    [-0.20, -0.02, 0.0],  // 6 left wrist
    [-0.20, -0.08, 0.0],  // 7 left hand
    [0.18, 0.45, 0.0],    // 8 right shoulder
    [0.20, 0.20, 0.0],    // 9 right elbow
    [0.20, -0.02, 0.0],   // 10 right wrist
    [0.20, -0.08, 0.0],   // 11 right hand
    [-0.10, -0.02, 0.0],  // 12 left hip
    [-0.10, -0.45, 0.0],  // 13 left knee
    [-0.10, -0.85, 0.0],  // 14 left ankle
    [-0.10, -0.90, 0.10], // 15 left foot
    [0.10, -0.02, 0.0],   // 16 right hip
    [0.10, -0.45, 0.0],   // 17 right knee
    [0.10, -0.85, 0.0],   // 18 right ankle
    [0.10, -0.90, 0.10],  // 19 right foot
    [0.0, 0.45, 0.0],     // 20 spine shoulder
    [-0.20, -0.14, 0.0],  // 21 left hand tip
    [-0.17, -0.07, 0.03], // 22 left thumb
    [0.20, -0.14, 0.0],   // 23 right hand tip
    [0.17, -0.07, 0.03],  // 24 right thumb
];

const RIGHT_SHOULDER: usize = 8;
/// Joints below the right shoulder that swing with the arm.
const RIGHT_ARM: [usize; 5] = [9, 10, 11, 23, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Archetype {
    /// Entities walk toward each other.
    Approach,
    /// Entities back away from each other.
    Retreat,
    /// Entities orbit their common midpoint.
    Circle,
    /// One entity waves a raised arm; the other stands still.
    Wave,
    /// Both entities hop in place.
    Jump,
    /// Both entities step sideways together.
    Sidestep,
}

impl Archetype {
    pub const ALL: [Archetype; 6] = [
        Archetype::Approach,
        Archetype::Retreat,
        Archetype::Circle,
        Archetype::Wave,
        Archetype::Jump,
        Archetype::Sidestep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Approach => "approach",
            Archetype::Retreat => "retreat",
            Archetype::Circle => "circle",
            Archetype::Wave => "wave",
            Archetype::Jump => "jump",
            Archetype::Sidestep => "sidestep",
        }
    }

    /// The first `n` archetypes.
    pub fn first(n: usize) -> Result<Vec<Archetype>> {
        if !(2..=Self::ALL.len()).contains(&n) {
            return Err(Error::invalid(format!(
                "synthetic data supports 2 to {} classes, got {n}",
                Self::ALL.len()
            )));
        }
        Ok(Self::ALL[..n].to_vec())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown archetype {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub classes: Vec<Archetype>,
    pub per_class: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
    /// Sample ids are `first_id..first_id + classes·per_class`; each id seeds
    /// its own generator stream.
    pub first_id: u64,
    pub role: SplitRole,
}

struct Placement {
    root: [f64; 3],
    yaw: f64,
}

struct SampleParams {
    gap: f64,
    speed: f64,
    scale: [f64; ENTITIES],
    heading: f64,
    phase: f64,
    cycles: f64,
    waver: usize,
}

impl SampleParams {
    fn draw(rng: &mut Rng) -> Self {
        Self {
            gap: rng.random_range(1.2..2.0),
            speed: rng.random_range(0.7..1.3),
            scale: [rng.random_range(0.9..1.1), rng.random_range(0.9..1.1)],
            heading: rng.random_range(-PI / 6.0..PI / 6.0),
            phase: rng.random_range(0.0..2.0 * PI),
            cycles: rng.random_range(1.5..2.5),
            waver: rng.random_range(0..ENTITIES),
        }
    }
}

/// Root placement of each entity at normalized time `u ∈ [0, 1]`.
fn placements(kind: Archetype, p: &SampleParams, u: f64) -> [Placement; ENTITIES] {
    let facing = |x0: f64, z0: f64, x1: f64, z1: f64, lift: [f64; 2]| {
        // Each entity faces the other.
        let yaw0 = (x1 - x0).atan2(z1 - z0);
        let yaw1 = (x0 - x1).atan2(z0 - z1);
        [
            Placement { root: [x0, 0.9 + lift[0], z0], yaw: yaw0 },
            Placement { root: [x1, 0.9 + lift[1], z1], yaw: yaw1 },
        ]
    };
    match kind {
        Archetype::Approach => {
            let half = 0.5 * p.gap * (1.0 - 0.6 * p.speed.min(1.25) * u);
            facing(-half, 0.0, half, 0.0, [0.0; 2])
        }
        Archetype::Retreat => {
            let half = 0.5 * p.gap * (0.4 + 0.6 * p.speed.min(1.25) * u);
            facing(-half, 0.0, half, 0.0, [0.0; 2])
        }
        Archetype::Circle => {
            let angle = p.phase + PI * p.speed * u;
            let r = 0.5 * p.gap;
            facing(-r * angle.cos(), -r * angle.sin(), r * angle.cos(), r * angle.sin(), [0.0; 2])
        }
        Archetype::Wave => facing(-0.5 * p.gap, 0.0, 0.5 * p.gap, 0.0, [0.0; 2]),
        Archetype::Jump => {
            let hop = |shift: f64| 0.25 * (2.0 * PI * p.cycles * u + p.phase + shift).sin().abs();
            facing(-0.5 * p.gap, 0.0, 0.5 * p.gap, 0.0, [hop(0.0), hop(0.7)])
        }
        Archetype::Sidestep => {
            let z = 0.8 * p.speed * u;
            facing(-0.5 * p.gap, z, 0.5 * p.gap, z, [0.0; 2])
        }
    }
}

/// Right-arm pose for the waving entity: the arm is raised and swings about
/// the shoulder in the frontal plane.
fn wave_arm(local: &mut [[f64; 3]; JOINTS], angle: f64) {
    let sh = local[RIGHT_SHOULDER];
    for &j in &RIGHT_ARM {
        // Raise: mirror the hanging arm above the shoulder, then swing.
        let rel = [local[j][0] - sh[0], sh[1] - local[j][1], local[j][2] - sh[2]];
        let (s, c) = angle.sin_cos();
        local[j] = [sh[0] + c * rel[0] + s * rel[1], sh[1] - s * rel[0] + c * rel[1], sh[2] + rel[2]];
    }
}

fn render(kind: Archetype, p: &SampleParams, frames: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros([COORDS, frames, JOINTS, ENTITIES]);
    let (hs, hc) = p.heading.sin_cos();
    for f in 0..frames {
        let u = f as f64 / (frames - 1) as f64;
        let place = placements(kind, p, u);
        for (e, pl) in place.iter().enumerate() {
            let mut local = REST_POSE.map(|j| j.map(|v| v * p.scale[e]));
            if kind == Archetype::Wave && e == p.waver {
                let swing = 0.6 * (2.0 * PI * p.cycles * u + p.phase).sin();
                wave_arm(&mut local, swing);
            }
            let (ys, yc) = pl.yaw.sin_cos();
            for (j, q) in local.iter().enumerate() {
                // Body yaw about the vertical axis, then placement, then the
                // global heading of the whole scene.
                let bx = yc * q[0] + ys * q[2] + pl.root[0];
                let bz = -ys * q[0] + yc * q[2] + pl.root[2];
                let by = q[1] + pl.root[1];
                let world = [hc * bx + hs * bz, by, -hs * bx + hc * bz];
                for (c, &v) in world.iter().enumerate() {
                    out.set(&[c, f, j, e], v as f32);
                }
            }
        }
    }
    out
}

/// Generates one split, deterministic under `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    if spec.classes.len() < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 classes"));
    }
    if spec.per_class == 0 {
        return Err(Error::invalid("samples per class must be positive"));
    }
    if spec.frames < 2 {
        return Err(Error::invalid("synthetic sequences need at least 2 frames"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise must be a finite non-negative number"));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut samples = Vec::with_capacity(spec.classes.len() * spec.per_class);
    let mut id = spec.first_id;
    for (label, &kind) in spec.classes.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut rng = Rng::seed_from_u64(spec.seed);
            rng.set_stream(id);
            let params = SampleParams::draw(&mut rng);
            let mut coords = render(kind, &params, spec.frames);
            if spec.noise > 0.0 {
                for v in coords.data_mut() {
                    *v += noise.sample(&mut rng) as f32;
                }
            }
            let meta = SequenceMeta {
                sample_id: id,
                source: format!("synthetic:{}", kind.name()),
                original_frames: spec.frames,
            };
            samples.push(SkeletonSequence::new(coords, label, meta)?);
            id += 1;
        }
    }
    let names = spec.classes.iter().map(|k| k.name().to_string()).collect();
    DatasetSplit::new(samples, names, spec.role)
}

/// Train and validation splits with disjoint sample ids.
pub fn generate_train_val(
    classes: &[Archetype],
    train_per_class: usize,
    val_per_class: usize,
    frames: usize,
    noise: f64,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let base = SyntheticSpec {
        classes: classes.to_vec(),
        per_class: train_per_class,
        frames,
        noise,
        seed,
        first_id: 0,
        role: SplitRole::Train,
    };
    let train = generate_synthetic_dataset(&base)?;
    let val = generate_synthetic_dataset(&SyntheticSpec {
        per_class: val_per_class,
        first_id: (classes.len() * train_per_class) as u64,
        role: SplitRole::Val,
        ..base
    })?;
    Ok((train, val))
}

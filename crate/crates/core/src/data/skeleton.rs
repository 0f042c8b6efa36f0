//! Skeleton sequences and the preprocessing applied before both streams.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::tensor::{check_permutation, Tensor};
use crate::Rng;

/// Coordinate axes per joint (x, y, z).
pub const COORDS: usize = 3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceMeta {
    pub sample_id: u64,
    pub source: String,
    pub original_frames: usize,
}

/// One labeled interaction sample: coordinates `(3, T, V, M)` in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    coords: Tensor<f32>,
    pub label: usize,
    pub meta: SequenceMeta,
}

impl SkeletonSequence {
    pub fn new(coords: Tensor<f32>, label: usize, meta: SequenceMeta) -> Result<Self> {
        match *coords.shape() {
            [COORDS, t, v, m] if t >= 2 && v >= 1 && m >= 1 => {}
            ref s => {
                return Err(Error::shape(format!(
                    "skeleton coordinates must be (3, T>=2, V, M), got {s:?}"
                )))
            }
        }
        coords.check_finite("skeleton coordinates")?;
        Ok(Self { coords, label, meta })
    }

    pub fn coords(&self) -> &Tensor<f32> {
        &self.coords
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn entities(&self) -> usize {
        self.coords.shape()[3]
    }

    fn with_coords(&self, coords: Tensor<f32>) -> Result<Self> {
        Self::new(coords, self.label, self.meta.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl SplitRole {
    pub fn as_u32(self) -> u32 {
        match self {
            SplitRole::Train => 0,
            SplitRole::Val => 1,
            SplitRole::Test => 2,
        }
    }

    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(SplitRole::Train),
            1 => Some(SplitRole::Val),
            2 => Some(SplitRole::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
            SplitRole::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<SkeletonSequence>,
    pub class_names: Vec<String>,
    pub role: SplitRole,
}

impl DatasetSplit {
    pub fn new(samples: Vec<SkeletonSequence>, class_names: Vec<String>, role: SplitRole) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid(format!("{} split is empty", role.as_str())));
        }
        let mut names = class_names.clone();
        names.sort();
        names.dedup();
        if names.len() != class_names.len() {
            return Err(Error::invalid("class names must be unique"));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::invalid(format!(
                "sample {} has label {} but only {} classes exist",
                s.meta.sample_id,
                s.label,
                class_names.len()
            )));
        }
        Ok(Self {
            samples,
            class_names,
            role,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Nearest-index resampling to exactly `target` frames: output frame `i`
/// reads input frame `floor(i·T/target)`.
pub fn resample_frames(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    if target < 2 {
        return Err(Error::invalid("target frame count must be at least 2"));
    }
    let t = seq.frames();
    if t == target {
        return Ok(seq.clone());
    }
    let (v, m) = (seq.joints(), seq.entities());
    let src = seq.coords();
    let out = Tensor::from_fn([COORDS, target, v, m], |i| {
        src.get(&[i[0], i[1] * t / target, i[2], i[3]])
    });
    seq.with_coords(out)
}

/// Appends zero-filled entities up to `target`.
pub fn pad_entities(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    let m = seq.entities();
    if m > target {
        return Err(Error::invalid(format!(
            "sequence has {m} entities, more than the target {target}"
        )));
    }
    if m == target {
        return Ok(seq.clone());
    }
    let src = seq.coords();
    let (t, v) = (seq.frames(), seq.joints());
    let out = Tensor::from_fn([COORDS, t, v, target], |i| if i[3] < m { src.get(i) } else { 0.0 });
    seq.with_coords(out)
}

/// Frame-to-frame joint displacement `x[:, t+1] - x[:, t]`, with the final
/// frame zero so the output keeps the input's `(3, T, V, M)` shape.
pub fn motion_difference(coords: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [c, t, v, m] = *coords.shape() else {
        return Err(Error::shape(format!("motion difference needs (C, T, V, M), got {:?}", coords.shape())));
    };
    if t < 2 {
        return Err(Error::invalid("motion difference needs at least 2 frames"));
    }
    let frame = v * m;
    let src = coords.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * t * frame;
        for f in 0..t - 1 {
            for j in 0..frame {
                let here = base + f * frame + j;
                out[here] = src[here + frame] - src[here];
            }
        }
    }
    Tensor::new([c, t, v, m], out)
}

/// Reorders entity slices: output entity `i` is input entity `perm[i]`.
pub fn permute_entities(seq: &SkeletonSequence, perm: &[usize]) -> Result<SkeletonSequence> {
    let coords = permute_entity_axis(seq.coords(), perm)?;
    seq.with_coords(coords)
}

pub fn permute_entity_axis(coords: &Tensor<f32>, perm: &[usize]) -> Result<Tensor<f32>> {
    let m = coords.shape()[3];
    check_permutation(perm, m)?;
    // Split along the entity axis and concatenate in permuted order.
    let parts = coords.split(3, &vec![1; m])?;
    let ordered: Vec<&Tensor<f32>> = perm.iter().map(|&p| &parts[p]).collect();
    Tensor::concat(&ordered, 3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleContext {
    Train,
    Eval,
}

/// Uniformly random entity order during training; the original order otherwise.
pub fn sample_entity_permutation(m: usize, rng: &mut Rng, ctx: SampleContext) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    if ctx == SampleContext::Train && m > 1 {
        perm.shuffle(rng);
    }
    perm
}

/// Subtracts the mean coordinate vector over all frames, joints and entities.
pub fn center_sequence(coords: &Tensor<f32>) -> Tensor<f32> {
    let c = coords.shape()[0];
    let per = coords.numel() / c;
    let mut out = coords.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        for v in chunk.iter_mut() {
            *v -= mean as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn random_seq(t: usize, v: usize, m: usize, seed: u64) -> SkeletonSequence {
        let mut rng = crate::Rng::seed_from_u64(seed);
        let coords = Tensor::from_fn([3, t, v, m], |_| rng.random_range(-1.0f32..1.0));
        SkeletonSequence::new(coords, 0, SequenceMeta::default()).unwrap()
    }

    #[test]
    fn sequence_invariants_enforced() {
        assert!(SkeletonSequence::new(Tensor::zeros([2, 4, 3, 1]), 0, SequenceMeta::default()).is_err());
        assert!(SkeletonSequence::new(Tensor::zeros([3, 1, 3, 1]), 0, SequenceMeta::default()).is_err());
        let mut bad = Tensor::zeros([3, 2, 1, 1]);
        bad.data_mut()[0] = f32::NAN;
        assert!(SkeletonSequence::new(bad, 0, SequenceMeta::default()).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let s = random_seq(5, 2, 1, 1);
        assert_eq!(resample_frames(&s, 5).unwrap(), s);
        let c = SkeletonSequence::new(Tensor::full([3, 7, 2, 1], 0.3), 0, SequenceMeta::default()).unwrap();
        for target in [2, 5, 13] {
            assert!(resample_frames(&c, target).unwrap().coords().data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn resample_picks_floor_indices() {
        let coords = Tensor::from_fn([3, 4, 1, 1], |i| i[1] as f32);
        let s = SkeletonSequence::new(coords, 0, SequenceMeta::default()).unwrap();
        let r = resample_frames(&s, 2).unwrap();
        assert_eq!(r.coords().get(&[0, 0, 0, 0]), 0.0);
        assert_eq!(r.coords().get(&[0, 1, 0, 0]), 2.0);
    }

    #[test]
    fn pad_entities_appends_zeros() {
        let s = random_seq(4, 3, 1, 2);
        let p = pad_entities(&s, 2).unwrap();
        assert_eq!(p.coords().shape(), &[3, 4, 3, 2]);
        for c in 0..3 {
            for t in 0..4 {
                for v in 0..3 {
                    assert_eq!(p.coords().get(&[c, t, v, 1]), 0.0);
                }
            }
        }
        let abs = |s: &SkeletonSequence| s.coords().data().iter().map(|v| v.abs()).sum::<f32>();
        assert_eq!(abs(&s), abs(&p));
        assert_eq!(pad_entities(&p, 2).unwrap(), p);
        assert!(pad_entities(&p, 1).is_err());
    }

    #[test]
    fn motion_of_static_sequence_is_zero() {
        let c = Tensor::full([3, 6, 4, 2], 1.7);
        assert!(motion_difference(&c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn motion_of_linear_trajectory() {
        let t = 5;
        let c = Tensor::from_fn([3, t, 1, 1], |i| match i[0] {
            0 => i[1] as f32,
            1 => 2.0 * i[1] as f32,
            _ => 0.0,
        });
        let m = motion_difference(&c).unwrap();
        for f in 0..t {
            let row = [m.get(&[0, f, 0, 0]), m.get(&[1, f, 0, 0]), m.get(&[2, f, 0, 0])];
            let want = if f < t - 1 { [1.0, 2.0, 0.0] } else { [0.0; 3] };
            assert_eq!(row, want);
        }
    }

    #[test]
    fn motion_matches_direct_loop() {
        let s = random_seq(7, 5, 2, 9);
        let x = s.coords();
        let m = motion_difference(x).unwrap();
        for c in 0..3 {
            for t in 0..7 {
                for v in 0..5 {
                    for e in 0..2 {
                        let want = if t + 1 < 7 { x.get(&[c, t + 1, v, e]) - x.get(&[c, t, v, e]) } else { 0.0 };
                        assert_eq!(m.get(&[c, t, v, e]).to_bits(), want.to_bits());
                    }
                }
            }
        }
        assert!(motion_difference(&Tensor::zeros([3, 1, 2, 1])).is_err());
    }

    #[test]
    fn permute_entities_swaps_and_inverts() {
        let s = random_seq(3, 2, 2, 4);
        let sw = permute_entities(&s, &[1, 0]).unwrap();
        for c in 0..3 {
            for t in 0..3 {
                for v in 0..2 {
                    assert_eq!(sw.coords().get(&[c, t, v, 0]), s.coords().get(&[c, t, v, 1]));
                    assert_eq!(sw.coords().get(&[c, t, v, 1]), s.coords().get(&[c, t, v, 0]));
                }
            }
        }
        let one = random_seq(3, 2, 1, 5);
        assert_eq!(permute_entities(&one, &[0]).unwrap(), one);
        assert!(permute_entities(&s, &[0, 0]).is_err());
    }

    #[test]
    fn entity_permutation_sampling() {
        let mut rng = crate::Rng::seed_from_u64(11);
        assert_eq!(sample_entity_permutation(1, &mut rng, SampleContext::Train), vec![0]);
        assert_eq!(sample_entity_permutation(3, &mut rng, SampleContext::Eval), vec![0, 1, 2]);
        let draws = 10_000;
        let swaps = (0..draws)
            .filter(|_| sample_entity_permutation(2, &mut rng, SampleContext::Train) == vec![1, 0])
            .count();
        let freq = swaps as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "swap frequency {freq}");
    }

    #[test]
    fn centering_removes_mean() {
        let s = random_seq(4, 3, 2, 6);
        let c = center_sequence(s.coords());
        for chunk in c.data().chunks(4 * 3 * 2) {
            let mean: f64 = chunk.iter().map(|&v| v as f64).sum::<f64>() / chunk.len() as f64;
            assert!(mean.abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn permutation_round_trip_and_motion_commutes(seed in any::<u64>(), m in 1usize..4) {
            let s = random_seq(4, 3, m, seed);
            let mut rng = crate::Rng::seed_from_u64(seed ^ 0x5a5a);
            let perm = sample_entity_permutation(m, &mut rng, SampleContext::Train);
            let p = permute_entities(&s, &perm).unwrap();
            let back = permute_entities(&p, &crate::tensor::inverse_permutation(&perm)).unwrap();
            prop_assert!(back.coords().bit_eq(s.coords()));

            let lhs = motion_difference(p.coords()).unwrap();
            let rhs = permute_entity_axis(&motion_difference(s.coords()).unwrap(), &perm).unwrap();
            prop_assert!(lhs.bit_eq(&rhs));
        }

        #[test]
        fn motion_ignores_constant_translation(seed in any::<u64>(), dx in -5.0f32..5.0, dy in -5.0f32..5.0, dz in -5.0f32..5.0) {
            let s = random_seq(5, 2, 2, seed);
            let offset = [dx, dy, dz];
            let moved = Tensor::from_fn([3, 5, 2, 2], |i| s.coords().get(i) + offset[i[0]]);
            let a = motion_difference(s.coords()).unwrap();
            let b = motion_difference(&moved).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        }

        #[test]
        fn resample_is_idempotent(seed in any::<u64>(), t in 2usize..20, target in 2usize..20) {
            let s = random_seq(t, 2, 1, seed);
            let once = resample_frames(&s, target).unwrap();
            prop_assert_eq!(resample_frames(&once, target).unwrap(), once);
        }
    }
}

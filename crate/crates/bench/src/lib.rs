//! Deterministic inputs shared by the benchmarks.

use thct_core::data::synthetic::{generate_train_val, Archetype};
use thct_core::data::DatasetSplit;
use thct_core::model::{prepare_batch, Batch};
use thct_core::{ModelConfig, Scalar, Tensor};

/// Smooth pseudo-random values in `[-1, 1]`.
pub fn wave<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product::<usize>().max(1);
    let data = (0..n).map(|i| S::from_f64(((i as f64) * 0.618_033_988_7).sin())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn synthetic(cfg: &ModelConfig, per_class: usize) -> DatasetSplit {
    let kinds = Archetype::first(cfg.num_classes).expect("at most six classes");
    generate_train_val(&kinds, per_class, 1, cfg.frames, 0.05, 7)
        .expect("valid synthetic spec")
        .0
}

/// The first `n` samples of `split` in original entity order.
pub fn batch(split: &DatasetSplit, cfg: &ModelConfig, n: usize) -> Batch<f32> {
    let samples: Vec<_> = split.samples.iter().take(n).collect();
    let perms: Vec<Vec<usize>> = samples.iter().map(|_| (0..cfg.entities).collect()).collect();
    prepare_batch(&samples, &perms, cfg).expect("samples conform to the config")
}

//! Skeleton ingestion, synthetic data, preprocessing and batching.

pub mod cache;
pub mod ntu;
pub mod skeleton;
pub mod synthetic;

pub use skeleton::{
    center_sequence, motion_difference, pad_entities, permute_entities, resample_frames,
    sample_entity_permutation, DatasetSplit, SampleContext, SequenceMeta, SkeletonSequence, SplitRole,
};

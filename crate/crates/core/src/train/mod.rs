//! Loss, optimizer, late fusion, evaluation, checkpoints and the training loop.

pub mod checkpoint;
pub mod eval;
pub mod fusion;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::{Checkpoint, RngState};
pub use eval::{evaluate, fusion_sweep, EvalReport, Metrics, StreamScores};
pub use fusion::late_fuse;
pub use loss::{cross_entropy_smoothed, two_stream_loss};
pub use optim::{lr_at_epoch, SgdNesterov};
pub use trainer::{train, EpochLog, TrainOutput, TrainState};

//! Two-stream hybrid CNN/Transformer network for skeleton-based interaction
//! recognition, built on a small dense tensor library with reverse-mode
//! differentiation.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
mod io;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{OpKind, Tape, Var};
pub use config::{FusionConfig, FusionSpace, ModelConfig, PermutationMode, TrainConfig, WindowSpec};
pub use error::{Error, Result};
pub use model::{Batch, ThctNet};
pub use nn::Mode;
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Scalar, Tensor};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

//! Layer library built on [`crate::autodiff`]: linear, convolution,
//! batch-norm, residual blocks, a ResNet-18-style backbone and LSTM.

mod backbone;
pub mod init;
mod layers;
mod lstm;

pub use backbone::{Backbone, BackboneConfig, ResidualBlock, STAGE_STRIDES};
pub use init::InitRng;
pub use layers::{BatchNorm2d, Conv2d, Linear};
pub use lstm::{Lstm, LstmLayer};

use rand::SeedableRng;

/// Deterministic initializer stream for `seed`.
pub fn init_rng(seed: u64) -> InitRng {
    InitRng::seed_from_u64(seed)
}

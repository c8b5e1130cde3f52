//! Differentiable building blocks with explicit forward/backward passes.

pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod gradcheck;
pub mod gru;
pub mod linalg;
pub mod mlp;
pub mod params;
pub mod tcn;

use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use batchnorm::{masked_temporal_batchnorm, BatchNormParams, Mode, RunningStats};
pub use conv::{causal_dilated_conv, ConvFilterBank, Segments};
pub use dropout::recurrent_dropout_step;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use gru::{gru_cell_step, GruParams, GruStack};
pub use mlp::{mlp_head, MlpHeadParams};
pub use params::Params;
pub use tcn::{residual_block, Activation, ResidualBlock, TcnStack};

/// Randomness and rates used only while training.
#[derive(Debug, Clone)]
pub struct TrainCtx {
    pub rng: ChaCha8Rng,
    pub dropout: f64,
}

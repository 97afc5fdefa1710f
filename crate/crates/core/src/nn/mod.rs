//! Differentiable operators used by the segmentation network, the fruit
//! encoder and the matcher.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod matrix;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::grad_check;
pub use layers::{
    batch_norm, encoder_layer, global_avg_pool, init_batch_norm, init_encoder_layer, init_linear, init_sparse_conv,
    linear, sparse_conv, sparse_conv_tensor, Mode,
};
pub use loss::{cross_entropy, lovasz_softmax, masked_l1, CeInput};
pub use matrix::Matrix;
pub use optim::{adam_step, AdamState};
pub use params::ParamStore;
pub use tape::{softmax, softmax_in_place, Gradients, Tape, Var, BN_EPS, BN_MOMENTUM, LOG_CLAMP};

#[allow(unused_imports)]
pub(crate) use matrix::matmul_into;

#[cfg(test)]
mod tests;

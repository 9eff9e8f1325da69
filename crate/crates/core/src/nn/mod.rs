//! Layers and training machinery around the convolution: batch norm,
//! dropout, ReLU, pooling, fully connected, loss, initialization and
//! optimizers, plus the sequential network that ties them together.

mod activation;
mod batchnorm;
mod dropout;
mod init;
mod linear;
mod loss;
mod network;
mod optim;
mod pool;

pub use activation::Relu;
pub use batchnorm::{batchnorm_backward, BatchNorm2d};
pub use dropout::{dropout_backward, dropout_forward, Dropout};
pub use init::kaiming_init;
pub use linear::Linear;
pub use loss::cross_entropy_loss;
pub use network::{BackwardPlan, BackwardStats, ConvUnit, Layer, Mode, Network, ParamBlock};
pub use optim::{Adam, Optimizer, ParamGroup, Sgd};
pub use pool::{AvgPool2d, MaxPool2d};

/// Derives an independent stream seed from a base seed and a salt.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Convolutional network training engine with scheduled channel-wise sparse
//! back-propagation and exact backward-FLOPs accounting.
//!
//! Convolutions run through im2col and a deterministic matrix product. During
//! backward, each convolution may keep only the output channels with the
//! largest mean absolute gradient; the kept fraction follows a
//! [`DropSchedule`]. [`flops`] prices both paths analytically.

pub mod checkpoint;
pub mod conv;
pub mod datasets;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod schedule;
pub mod sparsify;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::{
    col2im, conv_backward_dense, conv_forward, im2col, ConvGeometry, ConvGradients, ConvLayer,
};
pub use datasets::{ChannelStats, LabeledDataset};
pub use error::{Error, Result};
pub use flops::{model_flops_report, EpochPlan, FlopsMeter, FlopsReport, LayerCost, RunTotals};
pub use model::{LayerSpec, ModelSpec, SampleShape};
pub use nn::{BackwardPlan, Mode, Network};
pub use schedule::{DropSchedule, Period, ScheduleKind};
pub use sparsify::{sparse_conv_backward, ChannelMask, SparsifyMode, SparsifyPolicy};
pub use tensor::{matmul, Element, Matrix, Precision, Tensor4};

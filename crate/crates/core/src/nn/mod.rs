//! Spatial operators, each with a forward pass and a hand-written backward pass.

pub mod conv;
pub mod deform;
pub mod norm;
pub mod pool;
pub mod residual;
pub mod trace;

pub use conv::{conv2d, conv2d_tape, ConvGeom, ConvKernel};
pub use deform::{
    bilinear_sample, bilinear_sample_tape, deform_conv2d, deform_conv2d_tape, make_offset_branch,
};
pub use norm::{batch_norm_tape, BatchNorm, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::{
    adaptive_kernel_size, adaptive_max_pool2d, adaptive_max_pool2d_tape, max_pool2d,
    max_pool2d_tape,
};
pub use residual::{residual_block_tape, ResidualBlock, ResidualVars};
pub use trace::{trace_sampling_locations, write_trace_csv, TraceLayer, TracePoint, TraceUnit};

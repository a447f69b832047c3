//! Scene-text recognizer built around deformable convolutions.
//!
//! The network is a CRNN (convolutional feature frames, bidirectional LSTM,
//! CTC transcription) whose middle convolutions can be replaced by
//! deformable ones that learn per-tap sampling offsets. Every operator has a
//! hand-written backward pass recorded on a [`GradTape`], and every backward
//! pass is checked against central finite differences in `f64`.
//!
//! Module map:
//! - [`tensor`], [`tape`]: storage and the gradient-accumulation contract.
//! - [`nn`]: convolution, deformable convolution, pooling, batch norm,
//!   residual blocks, receptive-field tracing.
//! - [`seq`]: frames, BiLSTM, class projection.
//! - [`ctc`]: loss, greedy decoding, brute-force oracle.
//! - [`model`]: configurable network and checkpoints.
//! - [`data`]: synthetic regular/curved/tilted text and dataset files.
//! - [`train`]: SGD, evaluation, gradient checks, ablation sweeps.
//! - [`settings`]: `key = value` run configuration.
//! - [`cli`]: the `dfcr` command line.

pub mod cli;
pub mod ctc;
pub mod data;
pub mod model;
pub mod error;
pub mod nn;
pub mod real;
pub mod seq;
pub mod settings;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{GradTape, Var};
pub use tensor::Tensor;

//! Stop-code tolerant recurrent convolutional image codec.
//!
//! An encoder network turns the current residual into one stack of binary
//! codes per 16x16 tile per iteration; a decoder accumulates additive
//! reconstructions. Tiles whose quality is good enough, or whose encoder
//! emits the all-zero code, stop: the all-zero stop code is transmitted once
//! and every later iteration for that tile is trimmed from the stream.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`], [`autograd`], [`layers`]: dense NHWC tensors, reverse-mode
//!   differentiation, convolutions and ConvLSTM cells.
//! - [`net`]: codec configuration, encoder/binarizer/decoder, full encode.
//! - [`mask`]: the stop-code state machine.
//! - [`bitstream`]: `.sct` serialization and the gzip outer container.
//! - [`train`]: two-pass (forced-mask / natural-mask) training.
//! - [`eval`]: PSNR, tile-error statistics, bitrate accounting, renders.
//! - [`checkpoint`]: model and optimizer persistence.
//! - [`image`], [`dataset`], [`config`], [`cli`]: I/O and the `sct` tool.

pub mod autograd;
pub mod bitstream;
pub mod checkpoint;
pub mod cli;
pub mod code;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod mask;
pub mod net;
pub mod tensor;
pub mod train;

pub use code::CodeTensor;
pub use error::{Error, Result};
pub use mask::{TileMask, TileQualityMap};
pub use net::{CodecConfig, EncodeOptions, Model};
pub use tensor::Tensor;

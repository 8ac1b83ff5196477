//! Super-resolution toolkit for digital elevation models.
//!
//! Upscales 25x25 low-resolution elevation tiles to 400x400 (16x) with a
//! MobileNetV3-style convolutional network trained from scratch on CPU, and
//! ships the classical bilinear/bicubic baselines it is compared against.
//! Everything — the 4D tensor autodiff substrate, the network, raster I/O,
//! terrain synthesis, training, and evaluation — is self-contained.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod interp;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

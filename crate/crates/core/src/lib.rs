//! Numerical core of a chest X-ray classification engine.
//!
//! A frozen VGG-16 convolutional backbone feeds a small dense head that is
//! trained with Adam on categorical cross-entropy. Grad-CAM maps explain the
//! head's decisions. Everything here is allocation-only `no_std`; file
//! formats, image decoding and the command line live in the `cxrnet` crate.
//!
//! Image tensors use the `[channels, height, width]` convention throughout.

#![no_std]
#![warn(rust_2018_idioms, unused_qualifications)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{PoolIndices, Tensor};

/// Class labels in their fixed order. Index 0 is COVID, 1 NORMAL, 2 INFECTION.
pub const CLASS_NAMES: [&str; 3] = ["COVID", "NORMAL", "INFECTION"];

/// Spatial side of a network input image.
pub const INPUT_SIDE: usize = 237;

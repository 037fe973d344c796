//! Files and processes around `cxrnet-core`: weight containers, image
//! datasets, Grad-CAM outputs and the `cxrnet` command line.

pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod synth;

pub use error::{ContainerError, Error, Result};

//! Multiscale augmented normalizing flow image codec.

pub mod cli;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod flow;
pub mod hierarchy;
pub mod image_io;
pub mod mask;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

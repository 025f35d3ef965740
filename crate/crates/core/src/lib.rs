//! Quantized and approximately orthogonal recurrent neural networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] dense matrices, decompositions and seeded sampling,
//! * [`quantize`] the uniform scaled quantizer and its straight-through rule,
//! * [`ortho`] orthogonality maps (Björck, exact projection), penalty and diagnostics,
//! * [`rnn`] the vanilla recurrent network with exact backpropagation through time,
//! * [`train`] optimizers and the quantization-aware training strategies,
//! * [`tasks`] benchmark generators and dataset loaders,
//! * [`fxp`] fixed-point activation calibration and the pure-integer recurrence.

pub mod error;
pub mod fxp;
pub mod numerics;
pub mod ortho;
pub mod quantize;
pub mod rnn;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};

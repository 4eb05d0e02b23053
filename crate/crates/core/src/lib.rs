//! Threshold attention kernels, composite segmentation blocks, and the
//! tooling to train and benchmark them on synthetic data.

pub mod autograd;
pub mod bench;
pub mod blocks;
pub mod checks;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod synth;
pub mod tam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

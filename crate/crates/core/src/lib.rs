//! Binary neural networks: sign-binarized training with the straight-through
//! estimator and bit-packed XNOR/popcount inference.

pub mod arch;
pub mod autodiff;
pub mod bench;
pub mod bittensor;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod modelio;
pub mod tensor;
pub mod train;

pub use error::{BnnError, Result};
pub use tensor::{FloatTensor, Real, Tensor};

//! Simulation and training of metasurface-integrated neural networks: MIMO
//! links whose transmitter encoder, programmable stacked-metasurface channel
//! and receiver decoder are optimized jointly as one network.

pub mod align;
pub mod channel;
pub mod checkpoint;
pub mod data;
pub mod elm;
pub mod harness;
pub mod error;
pub mod linalg;
pub mod minn;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;
pub mod wave;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var, C64};

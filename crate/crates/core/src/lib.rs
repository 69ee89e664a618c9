//! Self-supervised pretraining over hybrid conv-attention backbones.

pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod schedule;
pub mod ssl;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

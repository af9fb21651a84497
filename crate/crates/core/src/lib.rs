//! Handwritten mathematical expression recognition with a densely connected
//! convolutional encoder and a multi-scale coverage-attention GRU decoder.

mod kernels;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Mode, Tape, Var};
pub use tensor::{Tensor, TensorError};

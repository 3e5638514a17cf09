//! Reverse-mode differentiation over small dense tensors.
//!
//! The op set is deliberately narrow: 1-D convolution, dense layers, the
//! usual activations, pooling, group normalisation and a few broadcasting
//! helpers. Training runs in `f64`; every op is generic over [`Element`] so
//! the same forward code serves `f32` inference.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::{Container, Entry, EntryData};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use param::{GradBuffer, Param, ParamId, ParamStore};
pub use tensor::{DType, Element, Tensor};

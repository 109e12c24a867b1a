//! Selective hierarchical attention for document-level translation.
//!
//! The crate is generic over the scalar type (see [`Scalar`]); the aliases at
//! the bottom of this file pin the 64-bit instantiation used for training and
//! every numerical check.

pub mod attention;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod normalize;
pub mod optim;
pub mod scalar;
pub mod sparsemax;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore64 = graph::ParamStore<f64>;
pub type Graph64<'a> = graph::Graph<'a, f64>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint64 = model::Checkpoint<f64>;

//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); the aliases below name the two concrete forms.

pub mod codec;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod param;
mod rng;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BnStats, Graph, Var};
pub use nn::{global_pool, BnState, Mode, PoolDomain};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use scalar::{gemm, Scalar};
pub use tensor::{Tensor, TENSOR_MAGIC};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

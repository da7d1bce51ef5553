//! Neural-network acceleration middleware at desk scale.
//!
//! A model graph is rewritten, cloned per device, split into fused
//! depth-first loop nests and library-dispatched heavy layers, and executed
//! on the host or on a simulated accelerator through an asynchronous
//! offload queue. Numeric code is generic over [`Scalar`] (`f32`/`f64`).

pub mod autodiff;
pub mod cli;
pub mod dfp;
pub mod dnn;
pub mod error;
pub mod frontend;
pub mod kernels;
pub mod model_ir;
pub mod passes;
pub mod runtime;
pub mod scalar;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use model_ir::{DimTag, LayoutKind, ModelGraph, Op, TensorMeta};
pub use scalar::{max_rel_error, Scalar};
pub use tensor::{ParamTensor, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

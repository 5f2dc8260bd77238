//! Minimal tensor, autodiff and optimizer toolkit used by the anonymization
//! pipeline. Everything is generic over [`Scalar`] (`f32` or `f64`): models
//! train in `f32`, gradient checks run in `f64`.

pub mod error;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::NnError;
pub use graph::{Grads, Graph, Var};
pub use layers::{Conv, Linear};
pub use optim::Adam;
pub use params::{he_uniform, ParamGrads, ParamId, ParamStore, StoredParam};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamStore32 = ParamStore<f32>;

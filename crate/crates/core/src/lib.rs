//! Dense-tensor reverse-mode automatic differentiation with an Adam
//! optimizer and a portable binary checkpoint format.
//!
//! The math core is generic over the scalar type through [`Scalar`]
//! (any `num-traits` float works); the rest of the workspace uses the
//! `f64` aliases exported at the crate root.

pub mod adam;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod fdcheck;
pub mod graph;
pub mod init;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::Error;
pub use fdcheck::finite_difference_check;
pub use graph::NodeId;
pub use params::ParamId;
pub use scalar::Scalar;

/// Default scalar for the whole workspace: gradient checks demand
/// double precision and desk-scale sizes make speed noncritical.
pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type ParamStore = params::ParamStore<f64>;

/// Single-precision aliases for callers that trade accuracy for space.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::Graph<f32>;
pub type ParamStore32 = params::ParamStore<f32>;

pub type Result<T> = std::result::Result<T, Error>;

//! Two-stage temporal activity detection on video: a 3D convolutional
//! backbone, a temporal proposal subnet over multiscale anchor segments, 3D
//! RoI pooling and an activity classification subnet, trained jointly with
//! a small reverse-mode autodiff engine.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`); the
//! aliases below fix it for common use.

pub mod backbone;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod proposal;
pub mod roi;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Gradients, Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = pipeline::Model<f32>;
pub type Model64 = pipeline::Model<f64>;
pub type Dataset32 = dataset::Dataset<f32>;
pub type Dataset64 = dataset::Dataset<f64>;

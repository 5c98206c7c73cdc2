//! Rotation-equivariant point cloud completion built on Vector Neurons.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases at the bottom of this file pick a concrete precision.

pub mod audit;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod so3;
pub mod tensor;
pub mod training;
pub mod vn;

pub use autodiff::{concat, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use geometry::PointCloud;
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use model::{ModelConfig, Revnet};
pub use scalar::Scalar;
pub use so3::Rotation;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Rotation64 = Rotation<f64>;
pub type Rotation32 = Rotation<f32>;
pub type PointCloud64 = PointCloud<f64>;
pub type PointCloud32 = PointCloud<f32>;
pub type Revnet64 = Revnet<f64>;
pub type Revnet32 = Revnet<f32>;

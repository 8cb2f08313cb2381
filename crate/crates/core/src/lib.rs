//! Flow-guided volumetric motion retargeting, end to end on the CPU:
//! images are encoded into multi-resolution implicit feature volumes,
//! warped by learned 3D flow fields, aggregated across reference views and
//! decoded back into images. Training, evaluation and a synthetic
//! articulated-puppet dataset generator are included.
//!
//! All numeric code is generic over the scalar type: `f32` for training,
//! `f64` for finite-difference gradient checking.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flownet;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pose;
pub mod puppet;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod volwarp;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete aliases for the training precision.
pub type Tensor32 = tensor::Tensor<f32>;
pub type FeatureVolume32 = volwarp::FeatureVolume<f32>;
pub type FlowField32 = volwarp::FlowField<f32>;

/// Concrete aliases for the gradient-checking precision.
pub type Tensor64 = tensor::Tensor<f64>;
pub type FeatureVolume64 = volwarp::FeatureVolume<f64>;
pub type FlowField64 = volwarp::FlowField<f64>;

//! Two-stage MRI tumour segmentation and progression classification.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the common `f32` instantiations.

pub mod checkpoint;
pub mod cli;
pub mod jsonfloat;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod volume_io;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Param32 = tensor::Param<f32>;
pub type Param64 = tensor::Param<f64>;
pub type SegNet32 = networks::SegNet<f32>;
pub type SegNet64 = networks::SegNet<f64>;
pub type ResNet3d32 = networks::ResNet3d<f32>;
pub type ResNet3d64 = networks::ResNet3d<f64>;

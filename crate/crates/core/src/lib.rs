//! Center-specific mixture-of-experts segmentation on a from-scratch tensor engine.

pub mod alignment;
pub mod clinical;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mome;
pub mod nn;
pub mod segnet;
pub mod stats;
pub mod synth;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type SegModel32 = segnet::SegModel<f32>;
pub type SegModel64 = segnet::SegModel<f64>;

//! Tensors, layers and models with layer-wise freezing, an int8 reference
//! model, the plasticity controller and deterministic data loading.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common single-precision instantiation.

// Negated comparisons below are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod nn;
pub mod plasticity;
pub mod quant;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
pub type Layer32 = nn::Layer<f32>;
pub type Layer64 = nn::Layer<f64>;
pub type ReferenceModel32 = quant::ReferenceModel<f32>;
pub type QuantizedTensor32 = quant::QuantizedTensor<f32>;

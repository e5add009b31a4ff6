//! Feature inversion by guided diffusion.
//!
//! A pre-trained diffusion backbone is steered during reverse sampling so the
//! generated image's feature, under a chosen extractor, lands close to a
//! target feature in squared Euclidean distance. The numeric code is generic
//! over [`Scalar`] (`f32` / `f64`); the aliases below fix the common choices.

pub mod analysis;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod extractor;
pub mod feature;
pub mod guidance;
pub mod nn;
pub mod quantizer;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Schedule32 = schedule::VarianceSchedule<f32>;
pub type Schedule64 = schedule::VarianceSchedule<f64>;
pub type Feature32 = feature::FeatureVector<f32>;
pub type Feature64 = feature::FeatureVector<f64>;
pub type ToyUnet32 = backbone::ToyUnet<f32>;
pub type ToyUnet64 = backbone::ToyUnet<f64>;
pub type Trace32 = guidance::GenerationTrace<f32>;
pub type Trace64 = guidance::GenerationTrace<f64>;

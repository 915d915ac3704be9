//! Patch-level manifold knowledge distillation for small vision transformers.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases below pin the common choices.

pub mod audit;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod objective;
pub mod scalar;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Vit64 = vit::VitModel<f64>;
pub type Vit32 = vit::VitModel<f32>;

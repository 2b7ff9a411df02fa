//! Trajectory forecasting on vectorized traffic scenes.
//!
//! The pipeline: synthetic scene generation ([`synth`]), road-vector
//! segmentation and pruning ([`road`]), a transformer scene encoder with a
//! multimodal decoder ([`model`]) built on a small reverse-mode tensor engine
//! ([`autodiff`]), three self-supervised pretraining objectives plus the
//! downstream forecasting loss and metrics ([`tasks`]), and a deterministic
//! two-stage training harness with an ablation runner ([`harness`]).
//!
//! The numeric core is generic over the scalar type (`f32`/`f64`) through the
//! [`scalar::Scalar`] trait; training runs on `f32` with 64-bit loss
//! accumulation. Scene geometry is always `f64`.

pub mod autodiff;
pub mod harness;
pub mod model;
pub mod road;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod tasks;

/// Tensor type used for training and inference.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Double-precision tensor, used by oracles and high-accuracy checks.
pub type Tensor64 = autodiff::Tensor<f64>;
/// Graph instantiation used for training.
pub type Graph32<'a> = autodiff::Graph<'a, f32>;
// Model alias is added once the model module lands.

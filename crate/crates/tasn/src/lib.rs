//! Trilinear attention sampling for fine-grained recognition.
//!
//! The crate is built around three pieces:
//!
//! * [`trilinear`] turns convolutional feature maps into a stack of spatial
//!   attention maps via inter-channel relations;
//! * [`sampler`] converts an attention map into a non-uniform sampling grid
//!   and warps the input image through it, preserving either overall
//!   structure or one attended detail;
//! * [`distill`] and [`pipeline`] train a master network whose inputs are
//!   structure-preserved images, distilling detail knowledge from a part
//!   network that sees detail-preserved crops.
//!
//! Everything numeric is generic over the scalar type through [`num::Real`]
//! (implemented for `f32` and `f64`); the aliases at the crate root fix the
//! default `f64` precision used by the CLI.

pub mod distill;
pub mod gradcheck;
pub mod io;
pub mod num;
pub mod pipeline;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trilinear;

pub use tensor::TensorError;
pub use trilinear::AttentionVariant;

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision tensor.
pub type TensorF32 = tensor::Tensor<f32>;
/// Default-precision gradient tape.
pub type Tape = tape::Tape<f64>;
/// Default-precision image.
pub type ImageBuffer = sampler::ImageBuffer<f64>;
/// Default-precision attention stack.
pub type AttentionStack = trilinear::AttentionStack<f64>;
/// Default-precision model.
pub type TasnModel = pipeline::TasnModel<f64>;
/// Default-precision training configuration.
pub type TrainConfig = pipeline::TrainConfig<f64>;

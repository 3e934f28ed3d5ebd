//! Blockwise, pyramidal cross-attention image alignment.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). Inference and training run in `f32`; gradient
//! certification runs in `f64`. The aliases below name the common
//! instantiations.

pub mod aligner;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod blockops;
pub mod cli;
pub mod error;
pub mod io;
pub mod pyramid;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Result, XabaError};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ConvKernel32 = tensor::ConvKernel<f32>;
pub type AlignerWeights32 = aligner::AlignerWeights<f32>;
pub type AlignerWeights64 = aligner::AlignerWeights<f64>;
pub type PyramidWeights32 = pyramid::PyramidWeights<f32>;
pub type PyramidWeights64 = pyramid::PyramidWeights<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
